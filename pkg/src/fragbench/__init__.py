"""fragbench: 2D shape-fragmentation datasets, a fragment-assembly network,
and optimization baselines, evaluated under shared coverage/IoU metrics."""

__version__ = "0.1.0"
