
import os
from pathlib import Path

# Directory holding the MNIST IDX files (train-images-idx3-ubyte[.gz] etc.)
DATA_DIR = Path(os.environ.get('MCLV_DATA_DIR', 'data'))
OUT_DIR = Path(os.environ.get('MCLV_OUT_DIR', 'runs'))
THREADS = int(os.environ.get('THREADS', 1))
DEFAULT_SEED = int(os.environ.get('DEFAULT_SEED', 0))

# Hard cap on a single dynamic-K tour
K_DYN_CAP = int(os.environ.get('K_DYN_CAP', 10**6))

# Enumeration budgets for the exact oracle
ENUMERATION_MAX_HIDDEN = int(os.environ.get('ENUMERATION_MAX_HIDDEN', 25))
CHAIN_MAX_UNITS = int(os.environ.get('CHAIN_MAX_UNITS', 14))

# log(1 + e^x) is taken as x above this argument
SOFTPLUS_CUTOFF = float(os.environ.get('SOFTPLUS_CUTOFF', 30.0))

# Training defaults
HIDDEN_UNITS = int(os.environ.get('HIDDEN_UNITS', 32))
EPOCHS = int(os.environ.get('EPOCHS', 100))
WARMUP_EPOCHS = int(os.environ.get('WARMUP_EPOCHS', 15))
BATCH_SIZE = int(os.environ.get('BATCH_SIZE', 100))
LEARNING_RATE = float(os.environ.get('LEARNING_RATE', 0.1))
RM_TAU = float(os.environ.get('RM_TAU', 50.0))
M = int(os.environ.get('M', 1))

# set default logging level to INFO
LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO').upper()
if LOG_LEVEL not in ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']:
    print(f"Invalid log level: {LOG_LEVEL}. Defaulting to 'INFO'.")
    LOG_LEVEL = 'INFO'

# Optionally create a `local_settings.py` file to override these settings
# during development. This file will be ignored by git.
try:
    from local_settings import *
except ImportError:
    pass
