"""Constants and defaults for the IGAP spectral toolkit."""

import os

# Output directory for generated graphs, checkpoints and reports
DATA_DIR = os.environ.get("IGAP_DATA_DIR", "data")

# Labels
UNLABELED = -1

# Spectral engine
DENSE_SIZE_CAP = 2000
PRETRAIN_FULL_BASIS_CAP = 2000
PRETRAIN_K = 256
ORTHO_TOL = 1e-8
RESIDUAL_TOL = 1e-6
PSD_TOL = 1e-9
DEGENERACY_TOL = 1e-9
LANCZOS_RESTART_FACTOR = 10

# Model
FILTER_DEGREE = 2
NUM_LAYERS = 2
HIDDEN_DIM = 128
HEAD_HIDDEN_DIM = 128
HEAD_OUT_DIM = 128

# Adam, no weight decay
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# Pre-training
FRAMEWORKS = ("subgraph", "linkpred", "localglobal")
EGO_RADIUS = 2
TEMPERATURE = 0.5
PRETRAIN_LR = 1e-4
PRETRAIN_EPOCHS = 500
BATCH_SIZE = 8
MASK_RATE = 0.1

# Augmentation
POS_EDGE_RATE = 0.05
POS_SIGNAL_SPARSITY = 0.05
POS_SIGNAL_SCALE = 0.05
NEG_EDGE_RATE = 0.4
NEG_SIGNAL_DENSITY = 0.5
NEG_SIGNAL_SCALE = 0.5

# Prompt fine-tuning
PROMPT_BANK_SIZE = 16
ALIGNED_COMPONENTS = 32
FINETUNE_LR = 1e-3
FINETUNE_EPOCHS = 100
CHECKPOINT_EVERY = 10
LOW_RANK = 16
ABLATIONS = ("none", "ps", "pt", "pl", "nolabel", "probe")

# Analysis
SNR_INFINITY = float("inf")
SNR_CLAMP = 1e-12

# Splits
SETTINGS = ("transductive", "semi-inductive", "inductive")
PER_CLASS_TRAIN = 100
VAL_TEST_RATIO = (2, 8)
SEMI_INDUCTIVE_CLASS_RATIO = 0.1

# Checkpoints
CHECKPOINT_MAGIC = b"IGAP"
CHECKPOINT_VERSION = 1

# Hyperparameter grids
L_SWEEP = (8, 16, 32, 64)
K_SWEEP = (16, 32, 64, 128)
