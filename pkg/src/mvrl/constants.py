# ===================================================================
#                      ENVIRONMENT VARIABLE KEYS
# ===================================================================
# Caps the number of CPU threads torch may use.
NUM_THREADS_ENV_VAR = "MVRL_NUM_THREADS"
# Overrides the log level chosen by the config (e.g. "DEBUG").
LOG_LEVEL_ENV_VAR = "MVRL_LOG_LEVEL"
# Enables the long training-run tests.
RUN_SLOW_TESTS_ENV_VAR = "MVRL_RUN_SLOW"


# ===================================================================
#                     DEFAULT CONFIGURATION VALUES
# ===================================================================
# These values are used as fallbacks if they are not specified in the YAML config.

# --- Autodiff ---
LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
CHECKPOINT_FORMAT_VERSION = 1

# --- Cart-pole ---
CARTPOLE_GRAVITY = 9.8
CARTPOLE_CART_MASS = 1.0
CARTPOLE_POLE_MASS = 0.1
CARTPOLE_HALF_LENGTH = 0.5
CARTPOLE_FORCE = 10.0
CARTPOLE_DT = 0.02
CARTPOLE_MAX_STEPS = 200
CARTPOLE_THETA_LIMIT_DEG = 12.0
CARTPOLE_X_LIMIT = 2.4
CARTPOLE_RESET_RANGE = 0.05

# --- Grid-pong ---
GRIDPONG_SIZE = 16
GRIDPONG_PADDLE_LENGTH = 3
GRIDPONG_POINTS_TO_WIN = 3
GRIDPONG_MAX_STEPS = 500

# --- Views ---
DEFAULT_EXTRA_DIMS = 2
DEFAULT_NOISE_SIGMA = 0.1

# --- Policy networks ---
DEFAULT_POLICY_HIDDEN = (64, 64)
DEFAULT_BASELINE_UNITS = 32

# --- PPO (hyperparameter table for cart-pole) ---
PPO_HORIZON = 2048
PPO_STEPSIZE = 3e-4
PPO_EPOCHS = 15
PPO_MINIBATCH = 1024
PPO_GAMMA = 0.99
PPO_LAMBDA = 0.95
PPO_ACTORS = 1
PPO_CLIP = 0.2
PPO_VALUE_COEFF = 0.5
PPO_ENTROPY_COEFF = 0.0
PPO_TARGET_KL = 0.05

# --- REINFORCE ---
REINFORCE_ETA = 0.01
REINFORCE_EPISODES = 16
REINFORCE_BASELINE_LR = 1e-3

# --- Multi-view model ---
LATENT_DIM_VECTOR = 16
LATENT_DIM_GRID = 32
BELIEF_DIM = 32
MODEL_HIDDEN_DIM = 64
MODEL_BATCH_SIZE = 16
MODEL_SEQ_LEN = 25
MODEL_PREDICTION_STEPS = 20
MODEL_RECONSTRUCTION_STEPS = 10
MODEL_LEARNING_RATE = 1e-3

# --- Control ---
RANDOM_ROLLOUTS_CARTPOLE = 20
ROLLOUT_MAX_STEPS = 40
PLAN_HORIZON = 15
PLAN_CANDIDATES = 200
DATASET_CAPACITY = 10_000
MLP_BASELINE_HIDDEN = 128

# --- Harness ---
EVAL_EPISODES = 20
SUCCESS_THRESHOLD = 195.0
KEY_ELEMENT_PERCENTILE = 20.0
SALIENCY_RATIO = 0.5
