"""Default constants shared by the library and the command line.

Each value is defined here once; every other module imports it.
"""

NUM_BRANCHES = 5
DECAY = 0.9

FROZEN_BRANCH_LR = 2e-4
JOINT_CALIBRATION_LR = 2e-5

DISAGREEMENT_THRESHOLD = 0.05
MAX_CLIP_SECONDS = 30.0
# Long-form sample budget; chosen here, no upstream value.
LONGFORM_MAX_SECONDS = 300.0

PARAM_INIT_SCALE = 0.08
TRAIN_PROB_FLOOR = 1e-12
