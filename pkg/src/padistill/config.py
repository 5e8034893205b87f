"""Experiment configuration: an INI-style file checked against a fixed schema.

Every key has a type and a default; unknown sections or keys are errors.
``resolve`` returns the full configuration (defaults filled in) and
``to_text`` writes it back so a run can be reproduced from its output
directory.
"""
from __future__ import annotations

import configparser
import os
import re
from dataclasses import dataclass
from importlib import resources

from .evalharness import EvalConfig
from .matching import MASK_MODES, MaskSpec, SurrogateConfig, TMConfig
from .nets import ARCHITECTURES, make_spec
from .scheduler import SchedulerConfig
from .trajectory import MatchRange


class ConfigError(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("\n".join(str(d) for d in self.diagnostics))


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" or "warning"
    section: str
    key: str
    message: str
    line: int | None = None

    def __str__(self):
        where = f"line {self.line}: " if self.line else ""
        key = f".{self.key}" if self.key else ""
        return f"{self.severity}: {where}[{self.section}]{key} {self.message}"


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _list(item):
    def parse(text: str):
        return tuple(item(p.strip()) for p in text.split(",") if p.strip())
    return parse


def _choice(*options):
    def parse(text: str):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    return parse


def _auto_int(text: str):
    t = text.strip().lower()
    return None if t in ("auto", "never", "none", "") else int(t)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "experiment": {
        "name": (str, "experiment"),
        "seed": (int, 0),
        "out": (str, "runs/experiment"),
        "workers": (int, 1),
    },
    "dataset": {
        "kind": (_choice("blobs", "idx"), "blobs"),
        "classes": (int, 10),
        "per_class": (int, 500),
        "test_per_class": (int, 200),
        "shape": (_list(int), (1, 8, 8)),
        "spread": (float, 1.0),
        "separation": (float, 3.0),
        "seed": (int, 0),
        "path": (str, ""),
        "test_path": (str, ""),
        "zca": (_bool, False),
        "zca_eps": (float, 1e-2),
    },
    "network": {
        "arch": (_choice(*ARCHITECTURES), "tiny-mlp"),
    },
    "scorer": {
        "kind": (_choice("el2n", "loss", "uncertainty"), "el2n"),
        "epochs": (int, 4),
        "models": (int, 5),
        "lr": (float, 0.05),
        "batch": (int, 128),
    },
    "scheduler": {
        "initial_ratio": (float, 0.75),
        "addition_end_epoch": (int, 20),
        "removal_ratio": (float, 0.0),
        "removal_epoch": (_auto_int, None),
        "removal_mode": (_choice("direct", "gradual"), "direct"),
        "addition": (_choice("linear", "step"), "linear"),
        "step_epochs": (int, 1),
    },
    "prune": {
        "ratio": (float, 0.0),
        "regime": (_choice("small", "large"), "small"),
    },
    "buffer": {
        "experts": (int, 10),
        "epochs": (int, 40),
        "lr": (float, 0.01),
        "batch": (int, 256),
        "seed": (int, 0),
    },
    "matcher": {
        "algorithm": (_choice("tm", "dc", "dm"), "tm"),
        "ipc": (int, 10),
        "label_init": (_choice("one_hot", "expert_soft"), "one_hot"),
        "syn_steps": (int, 20),
        "expert_epochs": (int, 2),
        "min_start_epoch": (int, 0),
        "start_epoch": (int, 10),
        "max_start_epoch": (int, 20),
        "interval": (int, 100),
        "student_lr": (float, 0.1),
        "learnable_student_lr": (_bool, False),
        "student_lr_lr": (float, 1e-5),
        "pixel_lr": (float, 10.0),
        "label_lr": (float, 2.0),
        "learn_labels": (_bool, True),
        "batch_syn": (int, 100),
        "iterations": (int, 500),
        "momentum": (float, 0.9),
        "mask_ratio": (float, 0.0),
        "mask_mode": (_choice(*MASK_MODES), "shallow_prefix"),
        "loss_rank_warmup": (int, 50),
        "batch_real": (int, 64),
        "reinit": (_bool, True),
        "inner_loops": (int, 1),
        "net_steps": (int, 1),
        "net_lr": (float, 0.01),
        "gm_distance": (_choice("cosine", "l2"), "cosine"),
        "surrogate_pixel_lr": (float, 1.0),
        "surrogate_momentum": (float, 0.5),
        "dm_layers": (_list(int), ()),
    },
    "eval": {
        "archs": (_list(str), ("tiny-mlp",)),
        "epochs": (int, 200),
        "lr": (float, 0.01),
        "batch": (int, 256),
        "momentum": (float, 0.9),
        "seeds": (_list(int), (0, 1, 2, 3, 4)),
        "random_baseline": (_bool, True),
    },
}


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def preset_names() -> list[str]:
    files = resources.files("padistill").joinpath("presets").iterdir()
    return sorted(f.name[:-4] for f in files if f.name.endswith(".ini"))


def resolve_path(name_or_path: str) -> tuple[str, str]:
    """``(text, source)`` for a config file path or a shipped preset name."""
    if os.path.exists(name_or_path):
        with open(name_or_path) as fh:
            return fh.read(), name_or_path
    res = resources.files("padistill").joinpath("presets", f"{name_or_path}.ini")
    if res.is_file():
        return res.read_text(), f"preset:{name_or_path}"
    raise FileNotFoundError(f"no config file or preset named {name_or_path!r} "
                            f"(presets: {', '.join(preset_names())})")


def _line_of(text: str, section: str, key: str | None) -> int | None:
    current = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return n
            continue
        if current == section and key and re.match(rf"{re.escape(key)}\s*[=:]", s):
            return n
    return None


class ExperimentConfig:
    """Typed view of a resolved configuration: ``cfg["matcher"]["ipc"]``."""

    def __init__(self, values: dict, source: str = "<config>", text: str = "",
                 overridden=frozenset()):
        self.values = values
        self.source = source
        self.text = text
        self.overridden = frozenset(overridden)

    def __getitem__(self, section):
        return self.values[section]

    @classmethod
    def parse(cls, text: str, source: str = "<config>", overrides=()) -> tuple[
            "ExperimentConfig | None", list[Diagnostic]]:
        diags: list[Diagnostic] = []
        parser = configparser.ConfigParser(interpolation=None,
                                           inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            if line is None and getattr(exc, "errors", None):
                line = exc.errors[0][0]
            msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            return None, [Diagnostic("error", "-", "", f"parse error: {msg}", line)]

        raw = {s: dict(parser[s]) for s in parser.sections()}
        overridden = set()
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                diags.append(Diagnostic("error", "-", "", f"override {item!r} must look "
                                        "like section.key=value"))
                continue
            dotted, value = item.split("=", 1)
            section, key = dotted.strip().split(".", 1)
            raw.setdefault(section, {})[key] = value.strip()
            overridden.add((section, key))

        values = {}
        for section, keys in SCHEMA.items():
            values[section] = {k: default for k, (_, default) in keys.items()}
        for section, entries in raw.items():
            if section not in SCHEMA:
                diags.append(Diagnostic("error", section, "", "unknown section",
                                        _line_of(text, section, None)))
                continue
            for key, text_value in entries.items():
                if key not in SCHEMA[section]:
                    line = None if (section, key) in overridden else _line_of(text, section, key)
                    diags.append(Diagnostic("error", section, key, "unknown key", line))
                    continue
                parse_fn = SCHEMA[section][key][0]
                try:
                    values[section][key] = parse_fn(text_value)
                except ValueError as exc:
                    line = None if (section, key) in overridden else _line_of(text, section, key)
                    diags.append(Diagnostic("error", section, key, f"bad value: {exc}", line))
        cfg = cls(values, source, text, overridden)
        diags += cfg.cross_check()
        return cfg, diags

    @classmethod
    def load(cls, name_or_path: str, overrides=()) -> "ExperimentConfig":
        text, source = resolve_path(name_or_path)
        cfg, diags = cls.parse(text, source, overrides)
        errors = [d for d in diags if d.severity == "error"]
        if errors:
            raise ConfigError(errors)
        return cfg

    def _diag(self, section, key, message, severity="error") -> Diagnostic:
        if (section, key) in self.overridden:
            return Diagnostic(severity, section, key, message + " (set on the command line)")
        return Diagnostic(severity, section, key, message, _line_of(self.text, section, key))

    def cross_check(self) -> list[Diagnostic]:
        d = []
        v = self.values
        ds, mt, bf = v["dataset"], v["matcher"], v["buffer"]
        if ds["classes"] < 2:
            d.append(self._diag("dataset", "classes", "needs at least 2 classes"))
        if len(ds["shape"]) != 3:
            d.append(self._diag("dataset", "shape", f"must be c, h, w; got {ds['shape']}"))
        if ds["kind"] == "idx":
            for key in ("path", "test_path"):
                if not ds[key]:
                    d.append(self._diag("dataset", key, "required when kind = idx"))
                elif not os.path.exists(ds[key]):
                    d.append(self._diag("dataset", key, f"file {ds[key]!r} does not exist"))
        elif mt["ipc"] > ds["per_class"]:
            d.append(self._diag("matcher", "ipc", f"ipc={mt['ipc']} exceeds dataset "
                                f"per_class={ds['per_class']}"))
        if ds["zca_eps"] <= 0:
            d.append(self._diag("dataset", "zca_eps", "must be positive"))
        if len(ds["shape"]) == 3:
            for section, key, archs in (("network", "arch", [v["network"]["arch"]]),
                                        ("eval", "archs", v["eval"]["archs"])):
                for arch in archs:
                    try:
                        make_spec(arch, ds["shape"], ds["classes"])
                    except ValueError as exc:
                        d.append(self._diag(section, key, str(exc)))
        for p in self.scheduler_config().problems():
            key = p.split("=", 1)[0].split(" ")[0]
            d.append(self._diag("scheduler", key if key in SCHEMA["scheduler"] else "", p))
        if not 0 <= mt["mask_ratio"] <= 1:
            d.append(self._diag("matcher", "mask_ratio",
                                f"mask_ratio={mt['mask_ratio']} outside [0, 1] (mask section of "
                                "the matcher)"))
        if mt["algorithm"] == "tm":
            for p in self.match_range().problems(bf["epochs"]):
                d.append(self._diag("matcher", "max_start_epoch", p))
        for p in self.tm_config().problems() if mt["algorithm"] == "tm" else []:
            if "start" not in p and "expert_epochs" not in p:
                d.append(self._diag("matcher", p.split("=", 1)[0], p))
        if not 0 <= v["prune"]["ratio"] < 1:
            d.append(self._diag("prune", "ratio", f"ratio={v['prune']['ratio']} outside [0, 1)"))
        if mt["ipc"] < 1:
            d.append(self._diag("matcher", "ipc", "must be >= 1"))
        for section, key in (("buffer", "experts"), ("buffer", "epochs"),
                             ("scorer", "epochs"), ("scorer", "models")):
            if v[section][key] < 1:
                d.append(self._diag(section, key, "must be >= 1"))
        if not v["eval"]["seeds"]:
            d.append(self._diag("eval", "seeds", "needs at least one seed"))
        if v["experiment"]["workers"] < 1:
            d.append(self._diag("experiment", "workers", "must be >= 1"))
        return d

    # -------------------------------------------------- domain objects

    def scheduler_config(self) -> SchedulerConfig:
        s = self.values["scheduler"]
        return SchedulerConfig(s["initial_ratio"], s["addition_end_epoch"], s["removal_ratio"],
                               s["removal_epoch"], s["removal_mode"],
                               self.values["buffer"]["epochs"], s["addition"], s["step_epochs"])

    def match_range(self) -> MatchRange:
        m = self.values["matcher"]
        return MatchRange(m["min_start_epoch"], m["start_epoch"], m["max_start_epoch"],
                          m["interval"], m["expert_epochs"])

    def tm_config(self) -> TMConfig:
        m = self.values["matcher"]
        return TMConfig(m["syn_steps"], m["student_lr"], m["learnable_student_lr"],
                        m["student_lr_lr"], m["pixel_lr"], m["label_lr"], m["learn_labels"],
                        m["batch_syn"], m["iterations"], m["momentum"], self.match_range(),
                        m["loss_rank_warmup"])

    def surrogate_config(self) -> SurrogateConfig:
        m = self.values["matcher"]
        return SurrogateConfig(m["iterations"], m["surrogate_pixel_lr"], m["surrogate_momentum"],
                               m["batch_real"], m["reinit"], m["inner_loops"], m["net_steps"],
                               m["net_lr"], m["gm_distance"])

    def mask_spec(self) -> MaskSpec:
        m = self.values["matcher"]
        return MaskSpec(m["mask_ratio"], m["mask_mode"])

    def eval_config(self) -> EvalConfig:
        e = self.values["eval"]
        return EvalConfig(e["epochs"], e["lr"], e["batch"], e["momentum"])

    def network_spec(self, arch: str | None = None):
        ds = self.values["dataset"]
        return make_spec(arch or self.values["network"]["arch"], ds["shape"], ds["classes"])

    # ----------------------------------------------------------- output

    def to_text(self) -> str:
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_render(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)


def validate_config(name_or_path: str, overrides=()) -> list[Diagnostic]:
    """All diagnostics for a config file, without running anything."""
    try:
        text, source = resolve_path(name_or_path)
    except FileNotFoundError as exc:
        return [Diagnostic("error", "-", "", str(exc))]
    _, diags = ExperimentConfig.parse(text, source, overrides)
    return diags
