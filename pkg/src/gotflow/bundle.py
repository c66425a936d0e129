"""The packaged Ads example bundle and the scaffold written by ``gotflow init``."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

BUNDLE_SUBDIR = Path("data", "workflows", "Ads")
_FILES = (
    "workflow.json",
    "input/parameters/trend.json",
    "prompts/sum_data_reader.txt",
    "prompts/sum_data_feature_determine.txt",
    "prompts/sum_trend_miner.txt",
    "prompts/sum_quantity_analysis.txt",
    "prompts/sum_quality_analysis_1.txt",
    "prompts/sum_quality_analysis_2.txt",
    "mock_yes.json",
    "mock_no.json",
)


def bundle_bytes(name: str) -> bytes:
    return resources.files("gotflow").joinpath("bundles", "ads", name).read_bytes()


def bundle_text(name: str) -> str:
    return bundle_bytes(name).decode("utf-8")


def write_bundle(root: str | Path) -> Path:
    """Write the bundle under ``root`` so that ``GF_ROOT=root`` resolves its paths.

    Refuses a non-empty ``root``. Returns the workflow file path.
    """
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        raise FileExistsError(f"{root} is not empty")
    target = root / BUNDLE_SUBDIR
    for name in _FILES:
        dest = target / name
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_bytes(bundle_bytes(name))
    return target / "workflow.json"
