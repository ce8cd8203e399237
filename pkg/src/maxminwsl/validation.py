from .data_types import RunConfig
from .exceptions import ConfigError
from .nets import selection_count


def validate_run_config(run_config: RunConfig) -> bool:
    """Cross-section checks that no single config section can make on its own."""
    gen, train = run_config.gen, run_config.train
    model, pool = train.model, train.pool

    if gen.num_classes != model.num_classes:
        raise ConfigError(
            f"gen.num_classes ({gen.num_classes}) and train.model.num_classes ({model.num_classes}) differ"
        )
    if gen.channels != model.in_channels:
        raise ConfigError(f"gen.channels ({gen.channels}) and train.model.in_channels ({model.in_channels}) differ")
    if gen.height % model.stride or gen.width % model.stride:
        raise ConfigError(
            f"Image size {gen.height}x{gen.width} is not divisible by the backbone stride {model.stride}"
        )

    map_pixels = (gen.height // model.stride) * (gen.width // model.stride)
    if selection_count(pool.kmax, map_pixels) < 1:
        raise ConfigError(f"train.pool.kmax={pool.kmax} selects no activation on {map_pixels}-pixel maps")
    if pool.kmin > 0 and selection_count(pool.kmin, map_pixels) < 1:
        raise ConfigError(f"train.pool.kmin={pool.kmin} selects no activation on {map_pixels}-pixel maps")
    return True
