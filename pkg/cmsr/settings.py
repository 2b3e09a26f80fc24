import os


def _env(name, default, cast=str):
    value = os.environ.get(name)
    if value is None or value == "":
        return default
    return cast(value)


"""
Upper bound on worker threads used for per-image evaluation and for splitting
training batches. Defaults to the number of CPUs.
"""
CMSR_THREADS = max(1, _env('CMSR_THREADS', os.cpu_count() or 1, int))


"""
Level name handed to logging.basicConfig() by the command-line tool.
"""
CMSR_LOG_LEVEL = _env('CMSR_LOG_LEVEL', 'INFO')


"""
Standard deviation of the zero-mean Gaussian used to initialize every kernel.
"""
CMSR_INIT_STD = _env('CMSR_INIT_STD', 1e-4, float)


"""
Training aborts when a loss exceeds this value.
"""
CMSR_DIVERGENCE_LIMIT = _env('CMSR_DIVERGENCE_LIMIT', 1e6, float)


"""
LR patch edge length and stride used when cutting training triplets. HR and
boundary patches are scaled by the upscaling factor.
"""
CMSR_PATCH_SIZE = _env('CMSR_PATCH_SIZE', 16, int)
CMSR_PATCH_STRIDE = _env('CMSR_PATCH_STRIDE', 4, int)


"""
Pixels closer than this (Euclidean) to a boundary pixel are scored by EPSNR.
"""
CMSR_EDGE_RADIUS = _env('CMSR_EDGE_RADIUS', 2.0, float)


"""
Set to 1 to run the desk-scale acceptance tests (minutes to an hour of CPU).
"""
CMSR_SLOW_TESTS = _env('CMSR_SLOW_TESTS', False,
                       lambda v: v.lower() in ('1', 'true', 'yes'))
