"""Report generation for Marksman experiments."""

import json
import logging
import pickle
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import torch
from jinja2 import Environment, FileSystemLoader, select_autoescape
from PIL import Image, ImageDraw

from .exceptions import StageError
from .models import RunManifest
from .utils import atomic_write_text, ensure_directory

logger = logging.getLogger(__name__)

RESIDUAL_GAIN = 50.0
REPORT_DIRNAME = "report"

SECTION_TITLES = {
    "attack_metrics": "Clean accuracy and attack success",
    "per_class": "Attack success per target class",
    "training": "Training curves",
    "rate_sweep": "Poisoning-rate sweep",
    "hyperparameters": "Alpha / beta sensitivity",
    "transfer": "Trigger transfer to other classifiers",
    "neural_cleanse": "Neural Cleanse",
    "strip": "STRIP entropy",
    "spectral": "Spectral signature",
    "fine_pruning": "Fine-Pruning",
    "attack_images": "Attack images",
}


@dataclass
class ReportSection:
    """One block of the report: tables, interactive figures and images."""

    name: str
    title: str
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    figures: Dict[str, go.Figure] = field(default_factory=dict)
    images: List[Path] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)


@dataclass
class ReportBundle:
    """Everything ``emit_report`` wrote."""

    directory: Path
    sections: List[str]
    absent: List[str]
    files: List[Path]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "directory": str(self.directory),
            "sections": self.sections,
            "absent": self.absent,
            "files": [str(p) for p in self.files],
        }


def residual_image(
    clean: torch.Tensor, backdoor: torch.Tensor, gain: float = RESIDUAL_GAIN
) -> torch.Tensor:
    """Amplified trigger residual ``clip(gain * (backdoor - clean), 0, 1)``."""
    return torch.clamp(gain * (backdoor - clean), 0.0, 1.0)


def _to_uint8(image: torch.Tensor) -> np.ndarray:
    array = (image.detach().cpu().clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    array = np.transpose(array, (1, 2, 0))
    if array.shape[2] == 1:
        array = np.repeat(array, 3, axis=2)
    return array


def image_grid(
    clean: torch.Tensor,
    backdoor: torch.Tensor,
    targets: torch.Tensor,
    scale: int = 3,
    gap: int = 2,
    label_height: int = 14,
) -> Image.Image:
    """Rows of clean, amplified residual and backdoor images, targets underneath."""
    if clean.shape != backdoor.shape or clean.shape[0] != targets.shape[0]:
        raise ValueError(
            f"Grid inputs disagree: clean {tuple(clean.shape)}, "
            f"backdoor {tuple(backdoor.shape)}, "
            f"targets {tuple(targets.shape)}"
        )
    residual = residual_image(clean, backdoor)
    n, _, height, width = clean.shape
    cell_w, cell_h = width * scale, height * scale
    canvas = Image.new(
        "RGB",
        (n * (cell_w + gap) + gap, 3 * (cell_h + gap) + gap + label_height),
        color=(255, 255, 255),
    )
    draw = ImageDraw.Draw(canvas)

    for col in range(n):
        x = gap + col * (cell_w + gap)
        for row, batch in enumerate((clean, residual, backdoor)):
            tile = Image.fromarray(_to_uint8(batch[col]))
            tile = tile.resize((cell_w, cell_h), Image.NEAREST)
            canvas.paste(tile, (x, gap + row * (cell_h + gap)))
        label_y = 3 * (cell_h + gap) + gap
        draw.text((x + 1, label_y), f"->{int(targets[col])}", fill=(0, 0, 0))
    return canvas


def _line(x: Any, y: Any, name: str) -> go.Scatter:
    return go.Scatter(x=x, y=y, mode="lines+markers", name=name)


def _markdown_table(frame: pd.DataFrame, float_format: str = "{:.4f}") -> str:
    def cell(value: Any) -> str:
        if isinstance(value, float):
            return "nan" if np.isnan(value) else float_format.format(value)
        return str(value)

    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "|" + "|".join("---" for _ in frame.columns) + "|"
    rows = [
        "| " + " | ".join(cell(v) for v in row) + " |"
        for row in frame.itertuples(index=False)
    ]
    return "\n".join([header, rule] + rows) + "\n"


class ReportGenerator:
    """Collects the outputs listed by a manifest into tables, plots and image grids."""

    def __init__(self, manifest_dir: Union[str, Path]):
        """Initialize the report generator.

        Raises:
            StageError: No manifest in ``manifest_dir``
        """
        self.root = Path(manifest_dir)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise StageError("report", f"No manifest.json in {self.root}")
        self.manifest = RunManifest.load(manifest_path)
        self.template_dir = Path(__file__).parent / "templates"
        self.env = Environment(
            loader=FileSystemLoader(str(self.template_dir)),
            autoescape=select_autoescape(["html"]),
        )

    def _run_files(self, filename: str) -> List[Tuple[str, Path]]:
        found = []
        for run in self.manifest.runs:
            path = self.root / run.name / filename
            if path.exists():
                found.append((run.name, path))
        return found

    # Sections

    def attack_metrics_section(self) -> Optional[ReportSection]:
        runs = self._run_files("metrics.csv")
        if not runs:
            return None
        frame = pd.concat([pd.read_csv(path) for _, path in runs], ignore_index=True)
        section = ReportSection("attack_metrics", SECTION_TITLES["attack_metrics"])
        section.tables["metrics"] = frame

        if self.manifest.summaries:
            section.tables["seed_summary"] = pd.DataFrame(
                [s.to_dict() for s in self.manifest.summaries.values()]
            )
        return section

    def per_class_section(self) -> Optional[ReportSection]:
        runs = self._run_files("per_class.csv")
        if not runs:
            return None
        table: Optional[pd.DataFrame] = None
        for name, path in runs:
            frame = pd.read_csv(path)[["target", "asr"]].rename(columns={"asr": name})
            if table is None:
                table = frame
            else:
                table = table.merge(frame, on="target", how="outer")
        table = table.sort_values("target").reset_index(drop=True)

        section = ReportSection("per_class", SECTION_TITLES["per_class"])
        section.tables["per_class_asr"] = table
        figure = go.Figure()
        for name, _ in runs:
            figure.add_trace(go.Bar(x=table["target"], y=table[name], name=name))
        figure.update_layout(
            xaxis_title="Target class", yaxis_title="ASR", yaxis_range=[0, 1]
        )
        section.figures["per_class_asr"] = figure
        return section

    def training_section(self) -> Optional[ReportSection]:
        runs = self._run_files("epochs.jsonl")
        if not runs:
            return None
        section = ReportSection("training", SECTION_TITLES["training"])
        loss_fig, probe_fig = go.Figure(), go.Figure()
        for name, path in runs:
            frame = pd.read_json(path, lines=True)
            if frame.empty:
                continue
            for column in ("clean_loss", "backdoor_loss", "trigger_loss"):
                trace = go.Scatter(
                    x=frame["epoch"], y=frame[column], name=f"{name} {column}"
                )
                loss_fig.add_trace(trace)
            for column in ("clean_accuracy", "asr"):
                if column in frame and frame[column].notna().any():
                    trace = go.Scatter(
                        x=frame["epoch"], y=frame[column], name=f"{name} {column}"
                    )
                    probe_fig.add_trace(trace)
        loss_fig.update_layout(xaxis_title="Epoch", yaxis_title="Loss")
        probe_fig.update_layout(
            xaxis_title="Epoch", yaxis_title="Probe metric", yaxis_range=[0, 1]
        )
        section.figures["losses"] = loss_fig
        if probe_fig.data:
            section.figures["probe_metrics"] = probe_fig
        return section

    def _sweep_frame(self) -> Optional[pd.DataFrame]:
        path = self.root / "sweep.csv"
        return pd.read_csv(path) if path.exists() else None

    def rate_sweep_section(self) -> Optional[ReportSection]:
        frame = self._sweep_frame()
        if frame is None:
            return None
        if "varied" in frame:
            frame = frame[frame["varied"].isna()].drop(columns=["varied"])
        if frame.empty:
            return None
        section = ReportSection("rate_sweep", SECTION_TITLES["rate_sweep"])
        section.tables["rate_sweep"] = frame
        figure = go.Figure()
        for method, group in frame.groupby("method"):
            group = group.sort_values("rate")
            figure.add_trace(_line(group["rate"], group["asr"], f"{method} ASR"))
            figure.add_trace(_line(group["rate"], group["clean"], f"{method} clean"))
        figure.update_layout(
            xaxis_title="Poisoning rate", yaxis_title="Accuracy", yaxis_range=[0, 1]
        )
        section.figures["rate_sweep"] = figure
        return section

    def hyperparameter_section(self) -> Optional[ReportSection]:
        frame = self._sweep_frame()
        if frame is None or "varied" not in frame or frame["varied"].isna().all():
            return None
        frame = frame[frame["varied"].notna()]
        section = ReportSection("hyperparameters", SECTION_TITLES["hyperparameters"])
        section.tables["hyperparameters"] = frame
        for varied, group in frame.groupby("varied"):
            group = group.sort_values(varied)
            figure = go.Figure()
            figure.add_trace(_line(group[varied], group["asr"], "ASR"))
            figure.add_trace(_line(group[varied], group["clean"], "clean"))
            figure.update_layout(
                xaxis_title=varied, yaxis_title="Accuracy", yaxis_range=[0, 1]
            )
            section.figures[f"sweep_{varied}"] = figure
        return section

    def transfer_section(self) -> Optional[ReportSection]:
        path = self.root / "transfer.csv"
        if not path.exists():
            return None
        section = ReportSection("transfer", SECTION_TITLES["transfer"])
        section.tables["transfer"] = pd.read_csv(path)
        return section

    def neural_cleanse_section(self) -> Optional[ReportSection]:
        runs = self._run_files("nc_norms.csv")
        if not runs:
            return None
        section = ReportSection("neural_cleanse", SECTION_TITLES["neural_cleanse"])
        rows, figure = [], go.Figure()
        for name, path in runs:
            norms = pd.read_csv(path)
            figure.add_trace(go.Bar(x=norms["target"], y=norms["mask_l1"], name=name))
            report = self._defense_report(name)
            if report is not None and report.get("neural_cleanse"):
                nc = report["neural_cleanse"]
                rows.append(
                    {
                        "run": name,
                        "anomaly_index": nc["anomaly_index"],
                        "flagged": nc["anomaly_index"] > nc.get("threshold", 2.0),
                        "flagged_class": nc.get("flagged_class"),
                    }
                )
        figure.update_layout(xaxis_title="Target class", yaxis_title="Mask L1 norm")
        section.figures["mask_norms"] = figure
        if rows:
            section.tables["anomaly_index"] = pd.DataFrame(rows)
        return section

    def strip_section(self) -> Optional[ReportSection]:
        runs = self._run_files("strip_entropies.csv")
        if not runs:
            return None
        section = ReportSection("strip", SECTION_TITLES["strip"])
        rows = []
        for name, path in runs:
            frame = pd.read_csv(path)
            figure = go.Figure()
            for kind, group in frame.groupby("kind"):
                figure.add_trace(
                    go.Histogram(x=group["entropy"], name=kind, opacity=0.6, nbinsx=30)
                )
            figure.update_layout(
                barmode="overlay",
                xaxis_title="Entropy",
                yaxis_title="Count",
                title=name,
            )
            section.figures[f"strip_{name}"] = figure
            report = self._defense_report(name)
            if report is not None and report.get("strip"):
                rows.append({"run": name, "auroc": report["strip"]["auroc"]})
        if rows:
            section.tables["strip_auroc"] = pd.DataFrame(rows)
        return section

    def spectral_section(self) -> Optional[ReportSection]:
        runs = self._run_files("spectral_scores.csv")
        if not runs:
            return None
        section = ReportSection("spectral", SECTION_TITLES["spectral"])
        for name, path in runs:
            frame = pd.read_csv(path)
            figure = go.Figure()
            for kind, group in frame.groupby("kind"):
                figure.add_trace(
                    go.Histogram(x=group["score"], name=kind, opacity=0.6, nbinsx=50)
                )
            figure.update_layout(
                barmode="overlay",
                xaxis_title="Correlation score",
                yaxis_title="Count",
                title=name,
            )
            section.figures[f"spectral_{name}"] = figure
        return section

    def fine_pruning_section(self) -> Optional[ReportSection]:
        runs = self._run_files("pruning_curve.csv")
        if not runs:
            return None
        section = ReportSection("fine_pruning", SECTION_TITLES["fine_pruning"])
        figure = go.Figure()
        frames = []
        for name, path in runs:
            curve = pd.read_csv(path)
            frames.append(curve.assign(run=name))
            figure.add_trace(
                _line(curve["ratio"], curve["clean_accuracy"], f"{name} clean")
            )
            if curve["asr"].notna().any():
                figure.add_trace(_line(curve["ratio"], curve["asr"], f"{name} ASR"))
        figure.update_layout(
            xaxis_title="Pruning ratio", yaxis_title="Accuracy", yaxis_range=[0, 1]
        )
        section.figures["pruning_curve"] = figure
        section.tables["pruning_curve"] = pd.concat(frames, ignore_index=True)
        return section

    def attack_images_section(self, directory: Path) -> Optional[ReportSection]:
        runs = self._run_files("samples.pt")
        if not runs:
            return None
        section = ReportSection("attack_images", SECTION_TITLES["attack_images"])
        for name, path in runs:
            bundle = torch.load(path, map_location="cpu")
            grid = image_grid(bundle["clean"], bundle["backdoor"], bundle["targets"])
            image_path = directory / f"attack_images_{name}.png"
            grid.save(image_path)
            section.images.append(image_path)
            max_residual = float((bundle["backdoor"] - bundle["clean"]).abs().max())
            section.notes.append(f"{name}: max |backdoor - clean| = {max_residual:.4f}")
        section.notes.append(
            f"Rows: clean, residual amplified {RESIDUAL_GAIN:g}x, backdoor; "
            f"labels give the target."
        )
        return section

    def _defense_report(self, run_name: str) -> Optional[Dict[str, Any]]:
        path = self.root / run_name / "defense_report.json"
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    # Output

    def collect(self, directory: Path) -> Tuple[List[ReportSection], List[str]]:
        builders = [
            ("attack_metrics", self.attack_metrics_section),
            ("per_class", self.per_class_section),
            ("training", self.training_section),
            ("rate_sweep", self.rate_sweep_section),
            ("hyperparameters", self.hyperparameter_section),
            ("transfer", self.transfer_section),
            ("neural_cleanse", self.neural_cleanse_section),
            ("strip", self.strip_section),
            ("spectral", self.spectral_section),
            ("fine_pruning", self.fine_pruning_section),
            ("attack_images", lambda: self.attack_images_section(directory)),
        ]
        sections, absent = [], []
        for name, build in builders:
            try:
                section = build()
            except (
                OSError,
                KeyError,
                ValueError,
                RuntimeError,
                pickle.UnpicklingError,
            ) as e:
                logger.warning(f"Report section '{name}' skipped: {e}")
                section = None
            if section is None:
                absent.append(name)
            else:
                sections.append(section)
        return sections, absent

    def generate(self, output_dir: Optional[Union[str, Path]] = None) -> ReportBundle:
        """Write report.html and report.md plus a CSV per table and an HTML per plot."""
        if output_dir:
            directory = ensure_directory(Path(output_dir))
        else:
            directory = ensure_directory(self.root / REPORT_DIRNAME)
        sections, absent = self.collect(directory)
        files: List[Path] = []

        for section in sections:
            files.extend(section.images)
            for table_name, frame in section.tables.items():
                path = directory / f"{table_name}.csv"
                atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g"))
                files.append(path)
            for figure_name, figure in section.figures.items():
                path = directory / f"{figure_name}.html"
                figure.write_html(str(path), include_plotlyjs="cdn")
                files.append(path)

        html_path = directory / "report.html"
        atomic_write_text(html_path, self.render_html(sections, absent, directory))
        md_path = directory / "report.md"
        atomic_write_text(md_path, self.render_markdown(sections, absent))
        files += [html_path, md_path]

        logger.info(
            f"Report written to {directory}: "
            f"{len(sections)} sections, {len(absent)} absent"
        )
        return ReportBundle(
            directory=directory,
            sections=[s.name for s in sections],
            absent=absent,
            files=files,
        )

    def render_html(
        self, sections: List[ReportSection], absent: List[str], directory: Path
    ) -> str:
        template = self.env.get_template("report.html")
        rendered = [
            {
                "name": s.name,
                "title": s.title,
                "tables": {
                    k: v.to_html(index=False, float_format="%.4f", border=0)
                    for k, v in s.tables.items()
                },
                "figures": {k: v.to_json() for k, v in s.figures.items()},
                "images": [p.relative_to(directory).as_posix() for p in s.images],
                "notes": s.notes,
            }
            for s in sections
        ]
        return template.render(
            manifest=self.manifest,
            sections=rendered,
            absent=[SECTION_TITLES[name] for name in absent],
            generated=datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
        )

    def render_markdown(self, sections: List[ReportSection], absent: List[str]) -> str:
        content = f"""# Marksman Experiment Report

**Config hash:** {self.manifest.config_hash[:12]}
**Code version:** {self.manifest.code_version}
**Runs:** {len(self.manifest.runs)}
**Generated:** {datetime.now().strftime("%Y-%m-%d %H:%M:%S")}

"""
        for section in sections:
            content += f"## {section.title}\n\n"
            for table_name, frame in section.tables.items():
                content += f"### {table_name}\n\n{_markdown_table(frame)}\n"
            for image in section.images:
                content += f"![{image.stem}]({image.name})\n\n"
            for note in section.notes:
                content += f"- {note}\n"
            if section.figures:
                links = ", ".join(f"[{n}]({n}.html)" for n in section.figures)
                content += f"Plots: {links}\n\n"

        if absent:
            content += "## Absent sections\n\n"
            for name in absent:
                content += f"- {SECTION_TITLES[name]}\n"
        return content


def emit_report(
    manifest_dir: Union[str, Path], output_dir: Optional[Union[str, Path]] = None
) -> ReportBundle:
    """Tables, plots and attack-image grids for the experiment in ``manifest_dir``.

    Missing inputs never fail the report; they are listed as absent sections.

    Raises:
        StageError: ``manifest_dir`` has no manifest
    """
    return ReportGenerator(manifest_dir).generate(output_dir)
