import os
import sys

# thread counts must be fixed before numpy loads its BLAS
if os.environ.get("POINCARE_LAB_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["POINCARE_LAB_THREADS"])

from .cli import main  # noqa: E402

sys.exit(main())
