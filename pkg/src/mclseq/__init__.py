"""Winner-take-all LSTM ensembles for grid-signal sequence prediction.

The package trains an ensemble of LSTM encoder/decoder/predictor models with
an ensemble-awareness loss: every training window is charged only to the
member that models it best, so members specialize on distinct spatiotemporal
dynamics without any explicit clustering of the data.
"""

import os

# Pin BLAS to one thread before numpy is imported anywhere downstream; our
# parallelism is across ensemble members and results must not depend on the
# worker count.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
del _var

__version__ = "0.1.0"
