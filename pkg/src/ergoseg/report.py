"""Ribbon reports: label ribbons (truth above prediction) and REBA curves per video."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.collections import LineCollection  # noqa: E402
from matplotlib.colors import to_hex  # noqa: E402
from matplotlib.patches import Patch  # noqa: E402

import numpy as np  # noqa: E402

CSV_FIELDS = ("frame", "gt_label", "pred_label", "gt_reba", "pred_reba")


def class_color(class_id: int) -> str:
    """Fixed colour per class id (tab20, cycling)."""
    return to_hex(plt.get_cmap("tab20")(int(class_id) % 20))


@dataclass
class RibbonReport:
    video_id: str
    gt_labels: np.ndarray | None
    pred_labels: np.ndarray | None
    gt_reba: np.ndarray | None
    pred_reba: np.ndarray | None
    class_names: list[str]

    def __post_init__(self):
        lengths = {len(t) for t in self.tracks().values() if t is not None}
        if len(lengths) != 1:
            raise ValueError(f"{self.video_id}: tracks disagree on frame count {sorted(lengths)}")

    def tracks(self) -> dict[str, np.ndarray | None]:
        return {"gt_label": self.gt_labels, "pred_label": self.pred_labels,
                "gt_reba": self.gt_reba, "pred_reba": self.pred_reba}

    @property
    def frames(self) -> int:
        return next(len(t) for t in self.tracks().values() if t is not None)

    def colors(self) -> dict[int, str]:
        return {c: class_color(c) for c in range(len(self.class_names))}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        tr = self.tracks()
        for t in range(self.frames):
            row = [t]
            for key in CSV_FIELDS[1:]:
                col = tr[key]
                if col is None:
                    row.append("NA")
                elif key.endswith("label"):
                    row.append(int(col[t]))
                else:
                    row.append(repr(float(col[t])))
            w.writerow(row)
        return buf.getvalue()

    def figure(self):
        has_labels = self.gt_labels is not None or self.pred_labels is not None
        has_risk = self.gt_reba is not None or self.pred_reba is not None
        rows = int(has_labels) + int(has_risk)
        fig, axes = plt.subplots(rows, 1, figsize=(10, 1.6 + 2.2 * rows), squeeze=False,
                                 sharex=True, height_ratios=[1, 2][:rows] if rows == 2 else None)
        axes = list(axes[:, 0])
        T = self.frames
        palette = self.colors()
        if has_labels:
            ax = axes.pop(0)
            for y0, track in ((0.5, self.gt_labels), (0.0, self.pred_labels)):
                if track is None:
                    continue
                rgba = np.array([matplotlib.colors.to_rgba(palette[int(c)]) for c in track])
                ax.imshow(rgba[None], aspect="auto", extent=(0, T, y0, y0 + 0.5),
                          interpolation="nearest")
            ax.set_ylim(0, 1)
            ax.set_yticks([0.75, 0.25], ["truth", "predicted"])
            ax.axhline(0.5, color="white", lw=1.5)
            used = sorted({int(c) for tr in (self.gt_labels, self.pred_labels)
                           if tr is not None for c in tr})
            ax.legend(handles=[Patch(color=palette[c], label=self.class_names[c]) for c in used],
                      loc="upper left", bbox_to_anchor=(1.0, 1.0), fontsize=7, frameon=False)
            ax.set_title(self.video_id)
        if has_risk:
            ax = axes.pop(0)
            t = np.arange(T)
            if self.gt_reba is not None:
                ax.plot(t, self.gt_reba, color="0.2", lw=1.2, ls="--", label="truth")
            if self.pred_reba is not None:
                pts = np.column_stack([t, self.pred_reba])
                segs = np.stack([pts[:-1], pts[1:]], axis=1)
                if self.pred_labels is not None:
                    cols = [palette[int(c)] for c in self.pred_labels[:-1]]
                else:
                    cols = ["tab:blue"] * len(segs)
                ax.add_collection(LineCollection(segs, colors=cols, lw=2.0, label="predicted"))
                ax.autoscale_view()
            ax.set_ylabel("REBA")
            ax.set_xlabel("frame")
            ax.set_xlim(0, max(T - 1, 1))
            ax.legend(loc="upper right", fontsize=7)
        fig.tight_layout()
        return fig

    def save(self, directory: str | Path, stem: str | None = None) -> tuple[Path, Path]:
        """Write ``<stem>.svg`` and ``<stem>.csv`` from this same object."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        stem = stem or self.video_id
        svg, table = directory / f"{stem}.svg", directory / f"{stem}.csv"
        fig = self.figure()
        with plt.rc_context({"svg.hashsalt": "ergoseg", "svg.fonttype": "none"}):
            fig.savefig(svg, format="svg", metadata={"Date": None})
        plt.close(fig)
        table.write_text(self.to_csv())
        return svg, table


def read_report_csv(path: str | Path) -> dict[str, list]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out: dict[str, list] = {k: [] for k in CSV_FIELDS}
    for r in rows:
        for k in CSV_FIELDS:
            v = r[k]
            out[k].append(None if v == "NA" else (int(v) if k in ("frame", "gt_label", "pred_label")
                                                 else float(v)))
    return out
