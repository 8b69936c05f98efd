""" Protocol constants and defaults used by fvworkbench """

# prompt templates
QUERY_PREFIX = "Q: "
ANSWER_CUE = "A: "
PAIR_SEPARATOR = "\n"
BLOCK_SEPARATOR = "\n\n"

# task data
TRAIN_FRACTION = 0.7
DEFAULT_SHOTS = 10

# mean activations and causal indirect effects
ACTIVATION_PROMPTS = 100
PROMPTS_PER_INSTRUCTION = 20
CIE_PROMPTS = 25
CIE_PROMPTS_PER_INSTRUCTION = 5
TOP_HEADS = 20

# instruction generation and selection
GENERATION_ROUNDS = 20
INSTRUCTIONS_PER_ROUND = 10
TOP_INSTRUCTIONS = 5
MIN_SUCCESSES = 20
SHORT_INSTRUCTION_MAX_TOKENS = 16

# uninformative baselines
EQUIPROBABLE_T0 = 0.1
EQUIPROBABLE_DT = 0.1
CORPUS_CACHE_TARGET = 2**16
CORPUS_MAX_TOKENS = 64
BASELINE_CANDIDATES = 100
BASELINES_PER_INSTRUCTION = 5

# eligibility; first-token accuracy an open-vocabulary task must beat
OPEN_GENERATION_CHANCE = 0.005

# miniature model
MINIATURE_LAYERS = 2
MINIATURE_HEADS = 4
MINIATURE_D_MODEL = 32
MINIATURE_N_CTX = 256
MINIATURE_MODEL_ID = "miniature"
MINIATURE_TUNED_MODEL_ID = "miniature-tuned"
MINIATURE_TRAINING_STEPS = 3000

# exit codes used by the CLI
EXIT_FAILURE = 1
EXIT_TRANSPORT = 2
EXIT_COMPATIBILITY = 3

__all__ = [
    "ACTIVATION_PROMPTS",
    "ANSWER_CUE",
    "BASELINES_PER_INSTRUCTION",
    "BASELINE_CANDIDATES",
    "BLOCK_SEPARATOR",
    "CIE_PROMPTS",
    "CIE_PROMPTS_PER_INSTRUCTION",
    "CORPUS_CACHE_TARGET",
    "CORPUS_MAX_TOKENS",
    "DEFAULT_SHOTS",
    "EQUIPROBABLE_DT",
    "EQUIPROBABLE_T0",
    "EXIT_COMPATIBILITY",
    "EXIT_FAILURE",
    "EXIT_TRANSPORT",
    "GENERATION_ROUNDS",
    "INSTRUCTIONS_PER_ROUND",
    "MINIATURE_D_MODEL",
    "MINIATURE_HEADS",
    "MINIATURE_LAYERS",
    "MINIATURE_MODEL_ID",
    "MINIATURE_N_CTX",
    "MINIATURE_TRAINING_STEPS",
    "MINIATURE_TUNED_MODEL_ID",
    "MIN_SUCCESSES",
    "OPEN_GENERATION_CHANCE",
    "PAIR_SEPARATOR",
    "PROMPTS_PER_INSTRUCTION",
    "QUERY_PREFIX",
    "SHORT_INSTRUCTION_MAX_TOKENS",
    "TOP_HEADS",
    "TOP_INSTRUCTIONS",
    "TRAIN_FRACTION",
]
