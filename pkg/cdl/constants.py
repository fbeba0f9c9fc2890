"""Constants shared across the package."""

# Quantizer defaults
DEFAULT_BITS = 6
DEFAULT_SHARPNESS = 500.0
DEFAULT_TOPK = 5
EXEMPT_BITS = 8

# Row chunk used when evaluating CPMFs over large tensors
CHUNK_ROWS = 4096

# Rounding noise tolerated when the two-term variance formula goes negative
VAR_ROUNDOFF = 1e-15

# Schema versions ("major.minor"); readers reject unknown majors
CONFIG_SCHEMA_VERSION = "1.0"
METRICS_SCHEMA_VERSION = "1.0"
LEDGER_SCHEMA_VERSION = "1.0"

# Binary file magics and versions
CHECKPOINT_MAGIC = b"CDLC"
CHECKPOINT_VERSION = (1, 0)
COMPRESSED_MAGIC = b"CDLZ"
# 1.1 appends the activation streams measured at compression time
COMPRESSED_VERSION = (1, 1)

# Default (lambda, gamma) sweep pairs
DEFAULT_SWEEP_PAIRS = [(round(0.01 * i, 2), round(0.01 * i, 2)) for i in range(10)]

# Run directory file names
METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.json"
SUMMARY_JSON = "summary.json"
CHECKPOINT_FILE = "model.ckpt"
ABORT_SNAPSHOT = "abort_snapshot.ckpt"
LEDGER_CSV = "ledger.csv"
LEDGER_JSON = "ledger.json"

# MNIST idx files
MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}
