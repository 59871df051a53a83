# cpudse - workload-aware CPU design space exploration
__version__ = "0.3.0"
