"""Demo corpora and the newline-delimited JSON import used by the CLI.

Import format: one JSON object per line, fields {identifier, title,
description, extras, files: [{name, media_kind, content_base64}],
links: [{to_identifier, annotation}], grants: [{user, capability}]}.
Records receive ids in line order; links are resolved by identifier in a
second pass so they may point forward.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

from .errors import MalformedJson, UnknownUser
from .repository import Capability, MediaKind, Repository

_FALLBACK_OWNER = "curator"


@dataclass(frozen=True)
class FixtureSummary:
    records: int
    files: int
    links: int
    grants: int
    users: int


def install(repo: Repository, rows: Iterable[dict]) -> FixtureSummary:
    """Create records, files, grants, then links from fixture row dicts."""
    rows = list(rows)
    records = files = links = grants = 0
    users_created = 0
    pending_links = []

    def ensure_user(user_id: str) -> None:
        nonlocal users_created
        try:
            repo.get_user(user_id)
        except UnknownUser:
            repo.add_user(user_id)
            users_created += 1

    for row in rows:
        row_grants = row.get("grants", [])
        owner = _owner_for(row_grants)
        ensure_user(owner)
        record = repo.create_record(
            title=row["title"],
            identifier=row["identifier"],
            extras=row.get("extras", {}),
            owner=owner,
            description=row.get("description", ""),
        )
        records += 1
        for entry in row_grants:
            ensure_user(entry["user"])
            repo.grant(entry["user"], record.record_id, Capability(entry["capability"]))
            grants += 1
        for spec in row.get("files", []):
            repo.upload_file(
                record.record_id,
                spec["name"],
                MediaKind(spec["media_kind"]),
                base64.b64decode(spec["content_base64"]),
                caller=owner,
            )
            files += 1
        for link in row.get("links", []):
            pending_links.append((record.record_id, link))

    for from_id, link in pending_links:
        target = repo.record_by_identifier(link["to_identifier"])
        repo.create_link(
            from_id, "record", target.record_id, "record", link.get("annotation", "")
        )
        links += 1

    return FixtureSummary(
        records=records,
        files=files,
        links=links,
        grants=grants,
        users=users_created,
    )


def load_fixture(repo: Repository, path: Union[str, Path]) -> FixtureSummary:
    rows = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise MalformedJson(f"{path}:{lineno}: {exc}") from exc
    return install(repo, rows)


def write_fixture(path: Union[str, Path], rows: Iterable[dict]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, ensure_ascii=False) + "\n")
            count += 1
    return count


def _owner_for(row_grants: list[dict]) -> str:
    for entry in row_grants:
        if entry["capability"] == "write":
            return entry["user"]
    return _FALLBACK_OWNER


def _text_file(name: str, text: str, media_kind: str = "plain_text") -> dict:
    return {
        "name": name,
        "media_kind": media_kind,
        "content_base64": base64.b64encode(text.encode("utf-8")).decode("ascii"),
    }


def _binary_file(name: str, payload: bytes) -> dict:
    return {
        "name": name,
        "media_kind": "unsupported",
        "content_base64": base64.b64encode(payload).decode("ascii"),
    }


def _grant_all(user: str = "alice") -> list[dict]:
    return [{"user": user, "capability": "write"}]


# ---------------------------------------------------------------------------
# literature corpus: one record holding many paper texts behind opaque names
# ---------------------------------------------------------------------------

_PAPER_TEXTS = [
    (
        "0931-2-4411-1-10-20190604.pdf",
        "Sulfide solid electrolytes offer high ionic conductivity at room "
        "temperature. We study the interface stability of argyrodite "
        "Li6PS5Cl against lithium metal anodes and report impedance growth "
        "over two hundred cycles. Interlayer coatings reduce the observed "
        "degradation substantially.",
    ),
    (
        "1044-1-5220-1-10-20200118.pdf",
        "Cathode active materials based on layered nickel-rich oxides were "
        "synthesised by co-precipitation. Capacity retention depends on the "
        "cobalt fraction and on calcination temperature. We map the phase "
        "diagram and suggest dopant strategies for high-voltage operation.",
    ),
    (
        "1282-1-9024-1-10-20210210.pdf",
        "Kadi4Mat: A research data infrastructure for materials science. "
        "This paper introduces Kadi4Mat, a research data infrastructure for "
        "materials science combining electronic lab notebook and repository "
        "concepts. Records, files, and collections structure heterogeneous "
        "research data, and a permission system controls who may read or "
        "edit each record. Workflows automate recurring analysis steps.",
    ),
    (
        "1301-3-7718-1-10-20210405.pdf",
        "Operando X-ray diffraction reveals lattice breathing in spinel "
        "cathodes during fast charging. Peak broadening correlates with "
        "particle cracking observed post mortem. We quantify strain as a "
        "function of state of charge.",
    ),
    (
        "1350-1-8101-1-10-20210822.pdf",
        "Machine learning interatomic potentials accelerate molecular "
        "dynamics of garnet electrolytes by four orders of magnitude. "
        "Training data were generated with density functional theory. "
        "Predicted activation energies agree with experiment within "
        "forty millielectronvolts.",
    ),
    (
        "1402-2-6633-1-10-20220114.pdf",
        "We review data management practices in battery research. Many "
        "groups rely on ad hoc spreadsheets; structured repositories remain "
        "rare. As sources we discuss laboratory information systems and the "
        "platform described in Kadi4Mat: A research data infrastructure for "
        "materials science, which this review cites as related work.",
    ),
    (
        "1477-1-2210-1-10-20220309.pdf",
        "Anode-free cells promise maximal energy density but suffer from "
        "inhomogeneous lithium plating. Pressure and electrolyte additives "
        "improve coulombic efficiency. We report a long-cycling cell with "
        "a fluorinated ether electrolyte.",
    ),
    (
        "1533-4-1140-1-10-20220717.pdf",
        "Impedance spectroscopy of composite cathodes is analysed with a "
        "transmission line model. Tortuosity extracted from the model "
        "matches microscopy-based reconstruction. Electrode design rules "
        "are derived for thick electrodes.",
    ),
    (
        "1609-1-3356-1-10-20230125.pdf",
        "Digital twins of battery cells combine electrochemical models with "
        "sensor data streams. We discuss calibration strategies and the "
        "role of standardised metadata for model exchange between "
        "laboratories.",
    ),
    (
        "1688-2-9471-1-10-20230602.pdf",
        "Recycling routes for lithium-ion cells are compared by life cycle "
        "assessment. Direct cathode recycling shows the lowest energy "
        "demand if sorting purity is high. Policy implications are "
        "discussed.",
    ),
    (
        "1710-1-0583-1-10-20230918.pdf",
        "Solid-state cells with thin-film sulfide separators reach high "
        "current densities at moderate stack pressure. Failure is dominated "
        "by void formation at the stripping interface rather than dendrite "
        "growth.",
    ),
    (
        "1754-3-2267-1-10-20240110.pdf",
        "A round robin study across eight laboratories quantifies the "
        "reproducibility of coin cell testing. Reported capacity spreads "
        "shrink threefold once assembly parameters are standardised and "
        "shared through a common data repository.",
    ),
]


def lisa_corpus() -> list[dict]:
    """Single metadata-poor record carrying a shelf of paper texts."""
    return [
        {
            "identifier": "solid-state-literature",
            "title": "Solid-state battery literature shelf",
            "description": (
                "Curated full texts of solid-state battery publications. "
                "File names follow the upstream archive's numeric scheme."
            ),
            "extras": {"domain": "solid-state batteries", "documents": len(_PAPER_TEXTS)},
            "files": [_text_file(name, text) for name, text in _PAPER_TEXTS],
            "links": [],
            "grants": _grant_all(),
        }
    ]


# ---------------------------------------------------------------------------
# ontology corpus: linked simulation records with prose descriptions
# ---------------------------------------------------------------------------


def polis_corpus() -> list[dict]:
    """Sixteen linked records; a solver record and its raw results sit at
    ids 14 and 13."""
    rows = []
    fillers = [
        ("electrolyte-screening-protocol", "Electrolyte screening protocol",
         "Standard operating procedure for screening candidate electrolytes "
         "by ionic conductivity and electrochemical stability window."),
        ("cathode-material-lnmo", "Cathode material LNMO",
         "High-voltage spinel LiNi0.5Mn1.5O4 powder batch with particle "
         "size distribution and surface area measurements."),
        ("anode-material-graphite", "Anode material graphite",
         "Synthetic graphite reference anode material used across cell "
         "builds, including tap density and impurity analysis."),
        ("separator-celgard-2325", "Separator Celgard 2325",
         "Trilayer polypropylene separator lot with thickness and porosity "
         "characterisation."),
        ("coin-cell-build-017", "Coin cell build 017",
         "Assembly log of coin cell build 017 combining the LNMO cathode "
         "with the graphite anode."),
        ("cycling-program-1c", "Cycling program 1C",
         "Galvanostatic cycling program at 1C between 3.5 and 4.9 volts "
         "with periodic impedance checks."),
        ("cycling-result-build-017", "Cycling result build 017",
         "Capacity fade curve of build 017 over 300 cycles; retention 87 "
         "percent."),
        ("ontology-term-catalogue", "Ontology term catalogue",
         "Catalogue of ontology classes used to annotate records in this "
         "collection: materials, processes, measurements, and agents."),
        ("sem-imaging-session-05", "SEM imaging session 05",
         "Scanning electron micrographs of cycled cathode cross sections, "
         "session 05."),
        ("xrd-scan-lnmo-pristine", "XRD scan LNMO pristine",
         "Powder diffraction scan of pristine LNMO with Rietveld "
         "refinement results."),
        ("structure-model-lnmo", "Structure model LNMO",
         "Relaxed crystal structure model of the LNMO spinel used as "
         "simulation input geometry."),
        ("simulation-plan-dft-024", "Simulation plan DFT 024",
         "Planning note for density functional theory study 024 covering "
         "cation ordering in LNMO."),
    ]
    for identifier, title, description in fillers:
        rows.append(
            {
                "identifier": identifier,
                "title": title,
                "description": description,
                "extras": {"collection": "battery-ontology"},
                "files": [],
                "links": [],
                "grants": _grant_all(),
            }
        )

    rows.append(
        {
            # line 13 -> record id 13
            "identifier": "raw-measurement-result-024",
            "title": "RawMeasurementResult",
            "description": (
                "Raw output of density functional theory study 024: total "
                "energies, ionic relaxation trajectory, and final geometry "
                "for the cation-ordering simulations."
            ),
            "extras": {"collection": "battery-ontology", "study": "dft-024"},
            "files": [
                _text_file(
                    "OUTCAR",
                    "free  energy   TOTEN  =      -212.43811 eV\n"
                    "energy without entropy =     -212.43611\n"
                    "reached required accuracy - stopping structural energy "
                    "minimisation\n",
                ),
                _text_file(
                    "OSZICAR",
                    "DAV:   1    -0.212438E+03   -0.68E-05   0.12E-06\n"
                    "   1 F= -.21243811E+03 E0= -.21243711E+03  d E =-.997E-05\n",
                ),
                _text_file(
                    "CONTCAR",
                    "LNMO relaxed cell\n1.0\n  8.17 0.00 0.00\n  0.00 8.17 "
                    "0.00\n  0.00 0.00 8.17\nLi Ni Mn O\n",
                ),
            ],
            "links": [],
            "grants": _grant_all(),
        }
    )
    rows.append(
        {
            # line 14 -> record id 14
            "identifier": "dft-solver-vasp",
            "title": "DFT Solver (plane-wave code)",
            "description": (
                "Software record for the DFT solver used in this "
                "collection: a plane-wave density functional theory code "
                "with projector augmented wave potentials. Simulation "
                "results produced with this DFT solver are linked to this "
                "record."
            ),
            "extras": {
                "collection": "battery-ontology",
                "software": "plane-wave DFT",
                "version": "6.4",
            },
            "files": [],
            "links": [
                {
                    "to_identifier": "raw-measurement-result-024",
                    "annotation": "produced simulation results",
                },
                {
                    "to_identifier": "structure-model-lnmo",
                    "annotation": "used input structure",
                },
            ],
            "grants": _grant_all(),
        }
    )
    rows.append(
        {
            "identifier": "postprocessing-scripts-024",
            "title": "Postprocessing scripts study 024",
            "description": (
                "Python scripts that parse the raw solver output of study "
                "024 and extract ordering energies."
            ),
            "extras": {"collection": "battery-ontology", "study": "dft-024"},
            "files": [
                _text_file(
                    "extract_energies.py",
                    "import re\n\n\ndef total_energy(text):\n    match = "
                    "re.search(r'TOTEN\\s+=\\s+(-?\\d+\\.\\d+)', text)\n    "
                    "return float(match.group(1))\n",
                    media_kind="code",
                )
            ],
            "links": [
                {
                    "to_identifier": "raw-measurement-result-024",
                    "annotation": "parses",
                }
            ],
            "grants": _grant_all(),
        }
    )
    rows.append(
        {
            "identifier": "ordering-energy-report-024",
            "title": "Ordering energy report 024",
            "description": (
                "Summary report of cation ordering energies extracted from "
                "study 024, with comparison to diffraction evidence."
            ),
            "extras": {"collection": "battery-ontology", "study": "dft-024"},
            "files": [],
            "links": [
                {
                    "to_identifier": "postprocessing-scripts-024",
                    "annotation": "derived with",
                }
            ],
            "grants": _grant_all(),
        }
    )
    return rows


# ---------------------------------------------------------------------------
# sensor-ML corpus: 417 heavily linked records around a training pipeline
# ---------------------------------------------------------------------------

_BREATHING_TOTAL = 417
_DATASET_LINE = 3
_RESULTS_LINE = 279
_MODEL_LINE = 369


def _dataset_description() -> str:
    intro = (
        "Windowed chest-movement sensor recordings packed as tfrecord "
        "shards for training breathing detection models. Each window holds "
        "256 samples of the piezo band signal at 64 Hz together with a "
        "binary breathing/no-breathing label produced by expert annotation. "
        "Windows overlap by 50 percent; subjects are split disjointly "
        "between training and evaluation shards to avoid leakage. "
    )
    preprocessing = (
        "Preprocessing: raw signals were detrended, bandpass filtered "
        "between 0.1 and 2.0 Hz, normalised per subject, and segmented. "
        "Artefact windows flagged by the annotation tool were dropped. "
        "Label noise was reduced by majority vote over three annotators. "
        "Shard manifest follows. "
    )
    manifest = "\n".join(
        f"shard {i:05d}: {3200 + 17 * i} windows, subjects S{(3 * i) % 20:02d}-"
        f"S{(3 * i + 2) % 20:02d}, session block {i % 8}"
        for i in range(40)
    )
    return intro + preprocessing + "\n" + manifest


def breathing_corpus() -> list[dict]:
    """417 records; the dataset, a training result, and a model land at
    ids 3, 279, and 369 so link hops between them span the corpus."""
    rows: list[dict] = []
    for line in range(1, _BREATHING_TOTAL + 1):
        if line == _DATASET_LINE:
            rows.append(
                {
                    "identifier": "cids-breathing-detection-tfrecords",
                    "title": "Breathing detection training data (tfrecords)",
                    "description": _dataset_description(),
                    "extras": {
                        "type": "kadiai:dataset",
                        "modality": "piezo respiration band",
                        "sampling_rate_hz": 64,
                        "window_samples": 256,
                        "shards": 40,
                    },
                    "files": [
                        _binary_file(
                            f"breathing-windows-{i:05d}-of-00040.tfrecord",
                            bytes([i % 256, 0x17, 0xF0, i % 7]),
                        )
                        for i in range(40)
                    ],
                    "links": [],
                    "grants": _grant_all(),
                }
            )
        elif line == _RESULTS_LINE:
            rows.append(
                {
                    "identifier": "cids-breathing-detection-results-training040",
                    "title": "Training result 040",
                    "description": (
                        "Metrics and artefacts of training run 040 of the "
                        "breathing detection pipeline: loss curves, "
                        "validation accuracy 0.947, and the chosen "
                        "hyperparameters."
                    ),
                    "extras": {
                        "type": "kadiai:training-result",
                        "run": 40,
                        "val_accuracy": 0.947,
                    },
                    "files": [],
                    "links": [
                        {
                            "to_identifier": "cids-breathing-detection-tfrecords",
                            "annotation": "trained on dataset",
                        }
                    ],
                    "grants": _grant_all(),
                }
            )
        elif line == _MODEL_LINE:
            rows.append(
                {
                    "identifier": "cids-breathing-detection-model-training040",
                    "title": "Breathing detection model (run 040)",
                    "description": (
                        "Convolutional breathing detection model exported "
                        "from training run 040. Breathing detection models "
                        "in this collection score windowed respiration "
                        "signals; the dataset they were trained on is "
                        "reachable through the linked training result."
                    ),
                    "extras": {"type": "kadiai:model", "run": 40},
                    "files": [],
                    "links": [
                        {
                            "to_identifier": (
                                "cids-breathing-detection-results-training040"
                            ),
                            "annotation": "exported by training run",
                        }
                    ],
                    "grants": _grant_all(),
                }
            )
        elif line % 40 == 9:
            run = line // 40
            rows.append(
                {
                    "identifier": f"cids-breathing-detection-model-run{line:03d}",
                    "title": f"Breathing detection model (run {run:03d})",
                    "description": (
                        f"Breathing detection model from exploratory run "
                        f"{run:03d}; superseded by later runs."
                    ),
                    "extras": {"type": "kadiai:model", "run": run},
                    "files": [],
                    "links": [],
                    "grants": _grant_all(),
                }
            )
        else:
            rows.append(
                {
                    "identifier": f"cids-breathing-scan-{line:04d}",
                    "title": f"Respiration scan session {line:04d}",
                    "description": (
                        f"Raw respiration scan session {line:04d}, subject "
                        f"S{line % 20:02d}, recorded with the chest band "
                        "setup."
                    ),
                    "extras": {
                        "type": "kadiai:scan",
                        "subject": f"S{line % 20:02d}",
                        "session": line,
                    },
                    "files": [],
                    "links": (
                        [
                            {
                                "to_identifier": f"cids-breathing-scan-{line - 1:04d}",
                                "annotation": "follows session",
                            }
                        ]
                        if line > 4 and (line - 1) % 40 != 9 and line - 1 != _RESULTS_LINE
                        else []
                    ),
                    "grants": _grant_all(),
                }
            )
    return rows


BUILTIN_CORPORA = {
    "lisa": lisa_corpus,
    "polis": polis_corpus,
    "breathing": breathing_corpus,
}
