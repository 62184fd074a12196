"""
Configuration file

Desk-scale defaults for weighting, training, memory and experiments
"""

# Weight scheme defaults
DEFAULT_POSITIVE_FAMILY = "contrastive"
DEFAULT_NEGATIVE_FAMILY = "contrastive"
DEFAULT_ALPHA = 2.0
DEFAULT_BETA = 50.0
DEFAULT_LAMBDA = 0.5
DEFAULT_TAU = 0.1
DEFAULT_HLL_A = 0.5
DEFAULT_HLL_B = 0.5

# Weight curve grid over the similarity range
CURVE_GRID_POINTS = 201
CURVE_REFERENCE_SIMILARITY = 0.0

# Histograms (weight contributions and similarity distributions)
DEFAULT_HISTOGRAM_BINS = 80

# Encoder
DEFAULT_INPUT_DIM = 16
DEFAULT_HIDDEN_DIMS = (64,)
DEFAULT_EMBEDDING_DIM = 8

# Batch construction: P classes x K samples
DEFAULT_CLASSES_PER_BATCH = 8
DEFAULT_SAMPLES_PER_CLASS = 4

# Optimizer (Adam with coupled weight decay)
DEFAULT_LEARNING_RATE = 1e-3
DEFAULT_WEIGHT_DECAY = 5e-4
DEFAULT_ADAM_BETAS = (0.9, 0.999)
DEFAULT_ADAM_EPS = 1e-8
LR_DECAY_MILESTONES = (0.5, 0.8)
LR_DECAY_FACTOR = 0.1

# Training
DEFAULT_ITERATIONS = 2000
DEFAULT_SEED = 0
DEFAULT_RECALL_KS = (1, 2, 4, 8)

# Memory
DEFAULT_MOMENTUM = 0.999
MEMORY_SIZE_BATCHES = 16  # capacity = MEMORY_SIZE_BATCHES * batch size

# Diagnostics
DEFAULT_DRIFT_INTERVAL = 100
DEFAULT_PROBE_SIZE = 256
DEFAULT_HARD_NEGATIVE_THRESHOLD = 0.5
COLLAPSE_CHANCE_MULTIPLIER = 2.0

# Synthetic dataset
DEFAULT_NUM_CLASSES = 16
DEFAULT_PER_CLASS = 64
DEFAULT_CENTER_SCALE = 1.0
DEFAULT_NOISE_SIGMA = 0.1
DEFAULT_TRAIN_FRACTION = 0.5
DEFAULT_NUISANCE_SIGMA = 0.0

# Collapse desk: class centers in a few dimensions, large class-independent noise elsewhere
COLLAPSE_INFORMATIVE_DIMS = 4
COLLAPSE_NUISANCE_SIGMA = 3.0

# Independent RNG substreams, keyed off the run seed
INIT_STREAM = 0
SAMPLER_STREAM = 1
PROBE_STREAM = 2

# Grid axes accepted by the grid command
GRID_AXES = ("alpha", "beta", "lambda", "tau", "a", "b", "momentum")
MOMENTUM_TABLE = (0.0, 0.5, 0.9, 0.99, 0.999, 0.9999)
DEFAULT_ALPHA_GRID = (0.01, 0.1, 1.0, 2.0, 5.0, 10.0, 20.0, 40.0)
DEFAULT_BETA_GRID = (1.0, 5.0, 10.0, 30.0, 50.0, 100.0)

# Drift runs start from an encoder warmed up by this many mini-batch iterations
DRIFT_WARMUP_ITERATIONS = 500

# Drift experiment: (column suffix, mode, momentum)
DRIFT_RUNS = (
    ("minibatch", "minibatch", 0.0),
    ("xbm", "memory", 0.0),
    ("smoco", "memory", 0.999),
)

# Exit codes
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_COLLAPSE = 3

# Environment variables read after load_dotenv
ENV_OUTPUT_DIR = "MEMORY_DML_OUTPUT_DIR"
ENV_JOBS = "MEMORY_DML_JOBS"
ENV_LOG_LEVEL = "MEMORY_DML_LOG_LEVEL"
