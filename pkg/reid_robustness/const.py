"""Constants for the ReID robustness benchmark toolkit."""
from __future__ import annotations

import json
from pathlib import Path

DOMAIN = "reid_robustness"

_MANIFEST = json.loads((Path(__file__).parent / "manifest.json").read_text("utf-8"))
VERSION: str = _MANIFEST["version"].strip()

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"

# Exit codes of the command line tool
EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INVARIANT = 3

MIN_IMAGE_SIDE = 8
MAX_SEVERITY = 5
SEED_MASK = (1 << 64) - 1

# Probability floor inside logarithms
LOG_EPS = 1e-12

CATEGORY_NOISE = "noise"
CATEGORY_BLUR = "blur"
CATEGORY_WEATHER = "weather"
CATEGORY_DIGITAL = "digital"

# Per-severity parameters, index 0 is severity 1. Pixel scale is [0, 1].
GAUSSIAN_NOISE_C = (0.08, 0.12, 0.18, 0.26, 0.38)
SHOT_NOISE_C = (60, 25, 12, 5, 3)
IMPULSE_NOISE_C = (0.03, 0.06, 0.09, 0.17, 0.27)
SPECKLE_NOISE_C = (0.15, 0.2, 0.35, 0.45, 0.6)

# (radius, alias blur)
DEFOCUS_BLUR_C = ((3, 0.1), (4, 0.5), (6, 0.5), (8, 0.5), (10, 0.5))
# (sigma, max pixel displacement, iterations)
GLASS_BLUR_C = ((0.7, 1, 2), (0.9, 2, 1), (1, 2, 3), (1.1, 3, 2), (1.5, 4, 2))
# (radius, sigma)
MOTION_BLUR_C = ((10, 3), (15, 5), (15, 8), (15, 12), (20, 15))
# (start, stop, step) of the zoom factors averaged together
ZOOM_BLUR_C = (
    (1.0, 1.11, 0.01),
    (1.0, 1.16, 0.01),
    (1.0, 1.21, 0.02),
    (1.0, 1.26, 0.02),
    (1.0, 1.31, 0.03),
)
GAUSSIAN_BLUR_C = (1, 2, 3, 4, 6)

# (flake density, image blend); every level shares the layer shape below
SNOW_C = ((0.1, 0.8), (0.2, 0.75), (0.3, 0.7), (0.4, 0.65), (0.5, 0.6))
# (scale, zoom, threshold, blur radius, blur sigma) of the flake layer
SNOW_LAYER = (0.3, 3, 0.5, 10, 4)
# (crystal opacity, haze) of the frost layer
FROST_C = ((0.45, 0.05), (0.55, 0.1), (0.65, 0.15), (0.75, 0.2), (0.85, 0.25))
# bluish white
FROST_TINT = (0.86, 0.92, 1.0)
# (fog strength, wibble decay); level 4 strength raised from 2.5 to 2.75
FOG_C = ((1.5, 2), (2, 2), (2.5, 1.7), (2.75, 1.5), (3, 1.4))
BRIGHTNESS_C = (0.1, 0.2, 0.3, 0.4, 0.5)
# (loc, scale, sigma, threshold, intensity, mud)
SPATTER_C = (
    (0.65, 0.3, 4, 0.69, 0.6, 0),
    (0.65, 0.3, 3, 0.68, 0.6, 0),
    (0.65, 0.3, 2, 0.68, 0.5, 0),
    (0.65, 0.3, 1, 0.65, 1.5, 1),
    (0.67, 0.4, 1, 0.65, 1.5, 1),
)
WATER_COLOR = (175 / 255.0, 238 / 255.0, 238 / 255.0)
MUD_COLOR = (63 / 255.0, 42 / 255.0, 20 / 255.0)
# (streaks per pixel column, length in px at height 256, alpha)
RAIN_C = (
    (0.02, 20, 0.3),
    (0.04, 25, 0.35),
    (0.06, 30, 0.4),
    (0.08, 35, 0.45),
    (0.10, 40, 0.5),
)
RAIN_ANGLE_RANGE = (-30.0, -10.0)

CONTRAST_C = (0.4, 0.3, 0.2, 0.1, 0.05)
# (displacement amplitude, smoothing sigma, affine jitter) as fractions of min(h, w)
ELASTIC_C = (
    (0.010, 0.04, 0.005),
    (0.020, 0.04, 0.010),
    (0.030, 0.04, 0.015),
    (0.045, 0.04, 0.020),
    (0.060, 0.04, 0.025),
)
PIXELATE_C = (0.55, 0.45, 0.35, 0.3, 0.2)
JPEG_C = (25, 18, 15, 10, 7)
# (saturation factor, saturation offset), saturation only goes up
SATURATE_C = ((1.5, 0), (2, 0), (3, 0.05), (5, 0.1), (20, 0.2))

FROST_MASK_SEEDS = (1013, 2027, 3041, 4057, 5077)
FROST_MASK_SIZE = 256

# ITU-R 601 luma weights
LUMA_WEIGHTS = (0.299, 0.587, 0.114)

# Augmentation defaults
ERASE_PROBABILITY = 0.5
ERASE_AREA_RANGE = (0.02, 0.4)
ERASE_ASPECT_RANGE = (0.3, 3.33)
ERASE_RETAIN_RATIO = 0.5
ERASE_ATTEMPTS = 100
ERASE_MEAN = (0.4914, 0.4822, 0.4465)
FILL_RANDOM = "per-pixel-random"
FILL_MEAN = "mean-value"

PATCH_AREA_RANGE = (0.05, 0.2)
PATCH_MIX_COEF = 0.5
PATCH_POOL_CAPACITY = 50000
PATCH_ASPECT_RANGE = (0.5, 2.0)

AUGMIX_WIDTH = 3
AUGMIX_DEPTH = -1
AUGMIX_ALPHA = 1.0
AUGMIX_SEVERITY = 3
AUGMIX_OPS = (
    "autocontrast",
    "equalize",
    "posterize",
    "rotate",
    "solarize",
    "shear_x",
    "shear_y",
    "translate_x",
    "translate_y",
)
AUGMIX_MAX_ROTATE = 15.0
AUGMIX_MAX_SHEAR = 0.1
AUGMIX_MAX_TRANSLATE = 0.1

# Metrics
PROTOCOL_SINGLE = "single"
PROTOCOL_REGDB = "regdb"
PROTOCOL_SYSU = "sysu"
DISTANCE_COSINE = "cosine"
DISTANCE_EUCLIDEAN = "euclidean"
DEFAULT_MAX_RANK = 10
REPORT_RANKS = (1, 5, 10)

# Losses
LAMBDA_CID = 1.0

# Protocol
SETTING_QUERY = "query"
SETTING_GALLERY = "gallery"
SETTING_BOTH = "both"
SETTING_CLEAN = "clean"
SETTINGS = (SETTING_QUERY, SETTING_GALLERY, SETTING_BOTH, SETTING_CLEAN)

MODE_A = "A"
MODE_B = "B"
XMODAL_GALLERY_ONLY = "gallery-only"
XMODAL_ALL_RGB = "all-rgb"
SYSU_GALLERY_DRAWS = 10
SYSU_ALL_SEARCH_CAMS = (1, 2, 4, 5)
SYSU_INDOOR_CAMS = (1, 2)

DEFAULT_REPEATS = 10
DEFAULT_WORKERS = 4

TAP_PRE_BNNECK = "pre-bnneck"
TAP_POST_BNNECK = "post-bnneck"
TAP_UNSPECIFIED = "unspecified"
TAPS = (TAP_UNSPECIFIED, TAP_PRE_BNNECK, TAP_POST_BNNECK)

SYNTH_DIM = 64
SYNTH_SIGMA0 = 0.02
SYNTH_SIGMA1 = 1.0
SYNTH_GAIN = 1.0

INCOMPLETE_MARKER = "INCOMPLETE"
PLAN_FILE = "plan.json"

MANIFEST_SCHEMA_VERSION = 1
MODALITY_RGB = "rgb"
MODALITY_IR = "ir"
SPLIT_TRAIN = "train"
SPLIT_QUERY = "query"
SPLIT_GALLERY = "gallery"
SPLITS = (SPLIT_TRAIN, SPLIT_QUERY, SPLIT_GALLERY)

# Published split sizes and default repeat counts
DATASET_PRESETS = {
    "market1501": {"query": 3368, "gallery": 19732, "cameras": 6, "repeats": 10},
    "cuhk03": {"query": 1400, "gallery": 5332, "cameras": 2, "repeats": 10},
    "msmt17": {"query": 11659, "gallery": 82161, "cameras": 15, "repeats": 3},
    "regdb": {
        "query": 2060,
        "gallery": 2060,
        "cameras": None,
        "repeats": 10,
        "protocol": PROTOCOL_REGDB,
    },
    "sysu-mm01": {
        "query": 3803,
        "gallery": None,
        "gallery_per_draw": 301,
        "cameras": 6,
        "repeats": 10,
        "protocol": PROTOCOL_SYSU,
    },
}
CROSS_MODALITY_DATASETS = ("regdb", "sysu-mm01")
