"""ModalPatch report viewer - Streamlit App.

Read-only view of a finished run:
sweep table → F1 / MSE per drop rate → per-frame MSE and uncertainty heatmaps

    streamlit run app/streamlit_app.py -- --workdir run
"""

import argparse
import os
import sys
from typing import Dict, List, Optional

import numpy as np
import pandas as pd

# Ensure project root is on sys.path
ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT_DIR not in sys.path:
    sys.path.insert(0, ROOT_DIR)

from app.config import PathsConfig
from app.errors import MissingArtifactError
from app.services.pgm import read_pgm
from app.services.reports import load_report


def parse_viewer_args(argv: Optional[List[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--workdir", default=".")
    args, _ = parser.parse_known_args(argv)
    return args


def reports_dir(workdir: str) -> str:
    return os.path.join(workdir, PathsConfig().reports)


def list_heatmaps(workdir: str) -> Dict[str, Dict[str, str]]:
    """Heatmap files grouped by ``<stream>_<t>_<modality>``, keyed by policy slug."""
    root = os.path.join(reports_dir(workdir), "heatmaps")
    grouped: Dict[str, Dict[str, str]] = {}
    if not os.path.isdir(root):
        return grouped
    for name in sorted(os.listdir(root)):
        if not name.endswith(".pgm"):
            continue
        stream_id, t, modality, slug = name[:-4].split("_", 3)
        grouped.setdefault(f"{stream_id}_{t}_{modality}", {})[slug] = os.path.join(root, name)
    return grouped


def pivot_metric(report: pd.DataFrame, metric: str) -> pd.DataFrame:
    """Rates as rows, policies as columns."""
    return report.pivot(index="drop_rate", columns="policy", values=metric).sort_index()


def as_image(values: np.ndarray, top: float) -> np.ndarray:
    """Scale a data-unit map back to [0, 1] for display."""
    return np.zeros_like(values) if top <= 0 else np.clip(values / top, 0.0, 1.0)


def render(workdir: str) -> None:
    import streamlit as st

    st.set_page_config(page_title="ModalPatch - Report Viewer", layout="wide")
    st.title("ModalPatch report viewer")
    st.caption(f"Workdir: {os.path.abspath(workdir)}")

    try:
        report = load_report(os.path.join(reports_dir(workdir), "report.csv"))
    except MissingArtifactError as exc:
        st.error(f"{exc}. Run `python -m app.cli sweep --workdir {workdir}` first.")
        return

    st.subheader("Sweep")
    st.dataframe(report, use_container_width=True)

    col1, col2 = st.columns(2)
    with col1:
        st.markdown("**Detection F1 by drop rate**")
        st.line_chart(pivot_metric(report, "f1"))
    with col2:
        modality = st.radio("Feature MSE", ["mse_img", "mse_pts"], horizontal=True)
        st.line_chart(pivot_metric(report, modality))

    single_path = os.path.join(reports_dir(workdir), "report_single.csv")
    if os.path.exists(single_path):
        st.subheader("One modality absent")
        st.dataframe(load_report(single_path), use_container_width=True)

    heatmaps = list_heatmaps(workdir)
    st.subheader("Per-cell MSE heatmaps")
    if not heatmaps:
        st.info("No heatmaps in this run.")
        return
    key = st.selectbox("Frame (stream_t_modality)", list(heatmaps))
    policies = heatmaps[key]
    columns = st.columns(len(policies))
    for column, (slug, path) in zip(columns, sorted(policies.items())):
        try:
            values, meta = read_pgm(path)
        except MissingArtifactError as exc:
            column.warning(str(exc))
            continue
        with column:
            st.image(as_image(values, float(meta.get("max", 0.0))), caption=slug, clamp=True, use_column_width=True)
            st.caption(f"mse {meta.get('mse', float('nan')):.5f}, max {meta.get('max', 0.0):.4g}")
            u_path = os.path.join(os.path.dirname(path), "uncertainty", os.path.basename(path))
            if os.path.exists(u_path):
                try:
                    u_values, u_meta = read_pgm(u_path)
                except MissingArtifactError as exc:
                    st.warning(str(exc))
                    continue
                st.image(as_image(u_values, float(u_meta.get("max", 0.0))), caption=f"{slug} U", clamp=True,
                         use_column_width=True)


if __name__ == "__main__":
    render(parse_viewer_args().workdir)
