"""Built-in crop presets: cardinal temperatures and survey stage labels."""

from __future__ import annotations

from dataclasses import dataclass

from .features import CardinalTemperatures


@dataclass(frozen=True)
class CropPreset:
    name: str
    cardinals: CardinalTemperatures
    stages: tuple[str, ...]


CROP_PRESETS = {
    p.name: p
    for p in (
        CropPreset(
            "corn",
            CardinalTemperatures(8.0, 30.0, 36.0),
            ("Planted", "Emerged", "Silking", "Dough", "Dented", "Mature", "Harvested"),
        ),
        CropPreset(
            "sorghum",
            CardinalTemperatures(12.0, 30.0, 36.0),
            ("Planted", "Headed", "Coloring", "Mature", "Harvested"),
        ),
        CropPreset(
            "soybeans",
            CardinalTemperatures(10.0, 28.0, 34.0),
            ("Planted", "Emerged", "Blooming", "Setting Pods", "Dropping Leaves", "Harvested"),
        ),
        CropPreset(
            "winter_wheat",
            CardinalTemperatures(2.0, 26.0, 32.0),
            ("Planted", "Emerged", "Headed", "Harvested"),
        ),
        CropPreset(
            "oats",
            CardinalTemperatures(2.0, 26.0, 32.0),
            ("Planted", "Emerged", "Headed", "Harvested"),
        ),
        CropPreset(
            "dry_beans",
            CardinalTemperatures(10.0, 30.0, 36.0),
            ("Planted", "Emerged", "Blooming", "Setting Pods", "Dropping Leaves", "Harvested"),
        ),
        CropPreset(
            "alfalfa",
            CardinalTemperatures(8.0, 26.0, 36.0),
            ("Planted", "Second Harvest", "Third Harvest", "Fourth Harvest"),
        ),
        CropPreset(
            "millet",
            CardinalTemperatures(11.0, 33.0, 46.0),
            ("Planted", "Harvested"),
        ),
    )
}


def crop_preset(name):
    """Return the preset for ``name`` (e.g. ``"corn"``)."""
    try:
        return CROP_PRESETS[name]
    except KeyError:
        raise ValueError(
            f"unknown crop preset {name!r}; available: {sorted(CROP_PRESETS)}"
        ) from None
