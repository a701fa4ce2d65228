"""Every method default in one place.

Values marked "published" are the ones reported for the original
BraTS 2020 grade/survival transfer-learning study; the rest are choices made
for this package and are flagged as such.
"""

# -- preprocessing (published) ---------------------------------------------
WINDOW_LO = -1000.0
WINDOW_HI = 800.0
SLICE_SEPARATION_MM = 30.0
# chosen: centre cut at 90 mm along inferior-superior, 30 mm apart
SLICE_POSITIONS_MM = (60.0, 90.0, 120.0)
SLICE_AXIS = 2
IMAGE_SIZE = (240, 240)
BRATS_DIMS = (240, 240, 155)

# -- cohort (published) -----------------------------------------------------
BRATS_N_HGG = 293
BRATS_N_LGG = 76
MODALITIES = ("T1", "T1ce", "T2", "FLAIR")
SURVIVAL_SHORT_MAX_DAYS = 365  # short: days < 365
SURVIVAL_MID_MAX_DAYS = 1825  # mid: 365 <= days <= 1825, long: > 1825
# LGG survival imputation: 24% in [4, 5) years, 76% in [5, 7] years
IMPUTE_SURVIVAL_P_SHORT_BAND = 0.24
IMPUTE_SURVIVAL_BAND_A = (1460, 1825)  # half-open
IMPUTE_SURVIVAL_BAND_B = (1825, 2555)  # closed
RESECTION_CODES = {"NA": 0, "STR": 1, "GTR": 2}

# -- cohort (chosen) --------------------------------------------------------
VAL_FRAC_OF_TRAIN = 0.2
TRAIN_FRAC = 0.8
GROUPING = "image_level"
RESECTION_ENCODING = "ordinal"
IMPUTED_RESECTION = "NA"

# -- model / training (published) --------------------------------------------
LEARNING_RATE = 0.0002
BATCH_SIZE = 16
EPOCHS = 10
NEURONS_1 = 256
NEURONS_2 = 512
DROPOUT = 0.5
ACTIVATION = "relu"
# the default head description names a single batch-norm layer
BN_LAYERS = 1
BACKBONE = "densenet121"

STUDY_BACKBONES = (
    "resnet50",
    "resnet101",
    "efficientnet_b4",
    "vgg16",
    "inception_v3",
    "inception_resnet_v2",
    "densenet121",
    "densenet201",
)

# -- studies (published) ----------------------------------------------------
SEARCH_GRID = {
    "bn_layers": [2, 1, 0],
    "neurons": [(32, 64), (64, 128), (128, 256), (256, 256)],
    "dropout_rate": [0.2, 0.3, 0.4, 0.5],
    "activation": ["relu", "tanh"],
    "learning_rate": [0.0005, 0.001, 0.002],
}
SPLIT_FRACTIONS = (0.9, 0.8, 0.7, 0.6, 0.5)
MONTE_CARLO_ITERATIONS = 10

# -- synthetic data (chosen) ------------------------------------------------
SYNTH_DIMS = (96, 96, 64)

SEED = 0
