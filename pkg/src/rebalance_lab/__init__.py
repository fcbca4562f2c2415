"""Mixed hash / routing-table rebalancing for key-partitioned stream operators."""

__version__ = "0.1.0"
