"""Run configuration: schema defaults, then a JSON file, then explicit flags."""
from __future__ import annotations

import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

import voluptuous as vol

from .const import (
    AUGMIX_ALPHA,
    AUGMIX_DEPTH,
    AUGMIX_SEVERITY,
    AUGMIX_WIDTH,
    DATASET_PRESETS,
    DEFAULT_MAX_RANK,
    DEFAULT_REPEATS,
    DEFAULT_WORKERS,
    DISTANCE_COSINE,
    DISTANCE_EUCLIDEAN,
    ERASE_AREA_RANGE,
    ERASE_ASPECT_RANGE,
    ERASE_MEAN,
    ERASE_PROBABILITY,
    ERASE_RETAIN_RATIO,
    FILL_MEAN,
    FILL_RANDOM,
    LAMBDA_CID,
    MODE_A,
    MODE_B,
    PATCH_AREA_RANGE,
    PATCH_MIX_COEF,
    PATCH_POOL_CAPACITY,
    SEED_MASK,
    SETTING_BOTH,
    SETTINGS,
    SYNTH_DIM,
    SYNTH_GAIN,
    SYNTH_SIGMA0,
    SYNTH_SIGMA1,
    SYSU_GALLERY_DRAWS,
    XMODAL_ALL_RGB,
    XMODAL_GALLERY_ONLY,
)
from .errors import UsageError

_LOGGER = logging.getLogger(__name__)

CONF_SEED = "seed"
CONF_REPEATS = "repeats"
CONF_SETTING = "setting"
CONF_MODE = "mode"
CONF_DATASET = "dataset"
CONF_WORKERS = "workers"
CONF_MAX_RANK = "max_rank"
CONF_DISTANCE = "distance"
CONF_CROSS_MODALITY = "cross_modality_corruption"
CONF_SYSU_DRAWS = "sysu_gallery_draws"
CONF_ERASE = "erase"
CONF_PATCH = "patch"
CONF_AUGMIX = "augmix"
CONF_LAMBDA_CID = "lambda_cid"
CONF_SYNTH = "synthetic"

_UNIT = vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))


def _pair(value):
    """Coerce a two-element list to a float tuple."""
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise vol.Invalid("expected a [low, high] pair")
    return tuple(float(v) for v in value)


ERASE_SCHEMA = vol.Schema(
    {
        vol.Optional("probability", default=ERASE_PROBABILITY): _UNIT,
        vol.Optional("area_ratio_range", default=list(ERASE_AREA_RANGE)): _pair,
        vol.Optional("aspect_ratio_range", default=list(ERASE_ASPECT_RANGE)): _pair,
        vol.Optional("retain_ratio", default=ERASE_RETAIN_RATIO): _UNIT,
        vol.Optional("fill", default=FILL_RANDOM): vol.In([FILL_RANDOM, FILL_MEAN]),
        vol.Optional("mean", default=list(ERASE_MEAN)): vol.All(
            [vol.All(vol.Coerce(float), vol.Range(min=0.0, max=1.0))], vol.Length(min=3, max=3)
        ),
    }
)

PATCH_SCHEMA = vol.Schema(
    {
        vol.Optional("block_area_range", default=list(PATCH_AREA_RANGE)): _pair,
        vol.Optional("mix_coef", default=PATCH_MIX_COEF): _UNIT,
        vol.Optional("pool_capacity", default=PATCH_POOL_CAPACITY): vol.All(
            int, vol.Range(min=1)
        ),
    }
)

AUGMIX_SCHEMA = vol.Schema(
    {
        vol.Optional("width", default=AUGMIX_WIDTH): vol.All(int, vol.Range(min=1)),
        vol.Optional("depth", default=AUGMIX_DEPTH): vol.All(int, vol.Range(min=-1)),
        vol.Optional("dirichlet_alpha", default=AUGMIX_ALPHA): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, min_included=False)
        ),
        vol.Optional("beta_alpha", default=AUGMIX_ALPHA): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, min_included=False)
        ),
        vol.Optional("severity", default=AUGMIX_SEVERITY): vol.All(
            int, vol.Range(min=1, max=10)
        ),
    }
)

SYNTH_SCHEMA = vol.Schema(
    {
        vol.Optional("dim", default=SYNTH_DIM): vol.All(int, vol.Range(min=1)),
        vol.Optional("sigma0", default=SYNTH_SIGMA0): vol.All(
            vol.Coerce(float), vol.Range(min=0.0)
        ),
        vol.Optional("sigma1", default=SYNTH_SIGMA1): vol.All(
            vol.Coerce(float), vol.Range(min=0.0)
        ),
        vol.Optional("distortion_gain", default=SYNTH_GAIN): vol.All(
            vol.Coerce(float), vol.Range(min=0.0)
        ),
    }
)

CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional(CONF_SEED, default=0): vol.All(int, vol.Range(min=0, max=SEED_MASK)),
        vol.Optional(CONF_REPEATS, default=None): vol.Any(
            None, vol.All(int, vol.Range(min=1))
        ),
        vol.Optional(CONF_SETTING, default=SETTING_BOTH): vol.In(SETTINGS),
        vol.Optional(CONF_MODE, default=None): vol.Any(None, vol.In([MODE_A, MODE_B])),
        vol.Optional(CONF_DATASET, default=None): vol.Any(None, vol.In(sorted(DATASET_PRESETS))),
        vol.Optional(CONF_WORKERS, default=DEFAULT_WORKERS): vol.All(int, vol.Range(min=1)),
        vol.Optional(CONF_MAX_RANK, default=DEFAULT_MAX_RANK): vol.All(int, vol.Range(min=1)),
        vol.Optional(CONF_DISTANCE, default=DISTANCE_COSINE): vol.In(
            [DISTANCE_COSINE, DISTANCE_EUCLIDEAN]
        ),
        vol.Optional(CONF_CROSS_MODALITY, default=XMODAL_GALLERY_ONLY): vol.In(
            [XMODAL_GALLERY_ONLY, XMODAL_ALL_RGB]
        ),
        vol.Optional(CONF_SYSU_DRAWS, default=SYSU_GALLERY_DRAWS): vol.All(
            int, vol.Range(min=1)
        ),
        vol.Optional(CONF_ERASE, default={}): ERASE_SCHEMA,
        vol.Optional(CONF_PATCH, default={}): PATCH_SCHEMA,
        vol.Optional(CONF_AUGMIX, default={}): AUGMIX_SCHEMA,
        vol.Optional(CONF_LAMBDA_CID, default=LAMBDA_CID): vol.All(
            vol.Coerce(float), vol.Range(min=0.0)
        ),
        vol.Optional(CONF_SYNTH, default={}): SYNTH_SCHEMA,
    }
)


def _merge(base: Dict[str, Any], update: Mapping[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, Mapping) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def validate_config(
    raw: Mapping[str, Any], dataset_hint: Optional[str] = None
) -> Dict[str, Any]:
    try:
        config = CONFIG_SCHEMA(dict(raw))
    except vol.Invalid as err:
        raise UsageError(f"Invalid configuration: {err}") from err
    if config[CONF_REPEATS] is None:
        preset = DATASET_PRESETS.get(config[CONF_DATASET] or dataset_hint or "", {})
        config[CONF_REPEATS] = preset.get("repeats", DEFAULT_REPEATS)
    return config


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    *,
    dataset_hint: Optional[str] = None,
) -> Dict[str, Any]:
    """Resolve the run configuration.

    ``overrides`` entries that are ``None`` are ignored, so unset command line
    flags fall through to the file and then to the defaults. The repeat count
    defaults to the preset of the configured dataset, else of ``dataset_hint``
    (usually the manifest header's dataset).
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise UsageError(f"Config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise UsageError(f"Config file {path} is not valid JSON: {err}") from err
        if not isinstance(loaded, dict):
            raise UsageError(f"Config file {path} must hold a JSON object")
        raw = loaded
        _LOGGER.debug("Loaded config file %s", path)
    if overrides:
        raw = _merge(raw, {k: v for k, v in overrides.items() if v is not None})
    return json_ready(validate_config(raw, dataset_hint))


def json_ready(config: Mapping[str, Any]) -> Dict[str, Any]:
    """Turn tuples into lists so the config embeds into reports as-is."""
    return json.loads(json.dumps(config))
