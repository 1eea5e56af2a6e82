"""Trace when gender becomes linearly separable in a from-scratch masked
language model, and whether explicit contextual cues override learned
stereotypical associations."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def builtin_data_path(name: str) -> Path:
    """Path of a bundled lexicon file (anchor_pairs.csv, anchor_exclusions.csv,
    targets.csv, attributes.csv)."""
    ref = resources.files("biasprobe").joinpath("data", name)
    if not ref.is_file():
        raise FileNotFoundError(f"no bundled data file named {name!r}")
    return Path(str(ref))
