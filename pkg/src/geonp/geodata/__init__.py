"""Observations, transforms, tiling, splits, episodes and synthetic data."""

from .episodes import (
    CONTEXT_RATIO_RANGE,
    Episode,
    PointSet,
    context_count,
    episode_rng,
    full_context,
    query_points,
    sample_episode,
)
from .observations import (
    QUALITY_COLUMNS,
    DataFormatError,
    Observation,
    csv_header,
    filter_observations,
    load_observations_csv,
    quality_filter,
    write_observations_csv,
)
from .synthetic import SyntheticConfig, SyntheticLandscape, SyntheticRegion, generate_synthetic_region
from .tiles import (
    EXCLUDED,
    MIN_SHOTS,
    TEST,
    TILE_PITCH,
    TRAIN,
    VAL,
    SplitAssignment,
    SplitError,
    Tile,
    assign_tiles,
    buffered_spatial_split,
    min_distance_to_test,
    parse_tile_id,
    tile_index,
)
from .transforms import (
    NormalizationSpec,
    backtransform_sigma,
    denormalize_coords,
    inverse_transform_agbd,
    normalize_coords,
    transform_agbd,
)
