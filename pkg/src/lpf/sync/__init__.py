from lpf.sync.conflicts import WriteInterval, resolve_conflicts
from lpf.sync.engine import SyncStats, account_h, run_superstep
from lpf.sync.exchange import ExchangeStats, exchange_bruck_randomized, exchange_direct

__all__ = [
    "ExchangeStats", "SyncStats", "WriteInterval", "account_h",
    "exchange_bruck_randomized", "exchange_direct", "resolve_conflicts", "run_superstep",
]
