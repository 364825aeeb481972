"""Experiment configuration: YAML in, validated and preset-expanded model out."""
from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .constants import TWO_PI
from .crystal import CrystalSpec, Mode, mode_structure
from .dynamics import NoiseModel, Timing
from .molecule import MASSES_AMU, MOLECULE_PRESETS, CombDrive, RotorModel, SelectionRule, ThermalEnvironment
from .protocols import ProtocolConfig


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", ser_json_inf_nan="constants")


CRYSTAL_PRESETS = {"MgH+/Mg+": {"m_atom_amu": MASSES_AMU["Mg+"], "m_molecule_amu": MASSES_AMU["MgH+"],
                                "f_atom_hz": 1.0e6}}


class CrystalSection(_Strict):
    preset: Optional[str] = "MgH+/Mg+"
    m_atom_amu: Optional[float] = Field(default=None, gt=0)
    m_molecule_amu: Optional[float] = Field(default=None, gt=0)
    f_atom_hz: Optional[float] = Field(default=None, gt=0)
    mode: Mode = Mode.MINUS

    @model_validator(mode="after")
    def _expand(self):
        if self.preset is not None:
            if self.preset not in CRYSTAL_PRESETS:
                raise ValueError(f"unknown crystal preset {self.preset!r}; choose from {sorted(CRYSTAL_PRESETS)}")
            for key, value in CRYSTAL_PRESETS[self.preset].items():
                if getattr(self, key) is None:
                    setattr(self, key, value)
        missing = [k for k in ("m_atom_amu", "m_molecule_amu", "f_atom_hz") if getattr(self, k) is None]
        if missing:
            raise ValueError(f"missing {', '.join(missing)} (or give a preset)")
        return self


class MoleculeSection(_Strict):
    preset: Optional[str] = None
    B: Optional[float] = Field(default=None, gt=0)
    D: Optional[float] = Field(default=None, ge=0)
    selection_rule: Optional[SelectionRule] = None
    dipole_moment: Optional[float] = Field(default=None, ge=0)
    resonance_wavelength: Optional[float] = Field(default=None, gt=0)
    J_max: Optional[int] = Field(default=None, ge=1)

    @model_validator(mode="after")
    def _expand(self):
        if self.preset is not None:
            if self.preset not in MOLECULE_PRESETS:
                raise ValueError(f"unknown molecule preset {self.preset!r}; choose from {sorted(MOLECULE_PRESETS)}")
            base = MOLECULE_PRESETS[self.preset]
            for key in ("B", "D", "selection_rule", "dipole_moment", "resonance_wavelength", "J_max"):
                if getattr(self, key) is None:
                    setattr(self, key, getattr(base, key))
        if self.B is None:
            raise ValueError("molecule needs B (or a preset)")
        defaults = RotorModel(B=self.B)
        for key in ("D", "selection_rule", "dipole_moment", "resonance_wavelength", "J_max"):
            if getattr(self, key) is None:
                setattr(self, key, getattr(defaults, key))
        return self

    def build(self):
        try:
            return RotorModel(B=self.B, D=self.D, selection_rule=self.selection_rule,
                              dipole_moment=self.dipole_moment, resonance_wavelength=self.resonance_wavelength,
                              J_max=self.J_max)
        except ValueError as exc:
            raise ConfigError(f"molecule: {exc}") from exc


class EnvironmentSection(_Strict):
    temperature: float = Field(default=300.0, gt=0)
    rethermalization_time: float = Field(default=5.0, gt=0)


class CombSection(_Strict):
    rep_rate_hz: float = Field(default=1.0e9, gt=0)
    offset_hz: float = 0.0
    center_wavelength: float = Field(default=800e-9, gt=0)
    power_per_comb: float = Field(default=1.0, ge=0)
    beam_waist: float = Field(default=20e-6, gt=0)
    span: float = Field(default=30e12, gt=0)

    def build(self):
        return CombDrive(omega_m=TWO_PI * self.rep_rate_hz, delta_omega_o=TWO_PI * self.offset_hz,
                         center_wavelength=self.center_wavelength, power_per_comb=self.power_per_comb,
                         beam_waist=self.beam_waist, span=self.span)


class NoiseSection(_Strict):
    detection_fidelity_bright: float = Field(default=0.8, ge=0, le=1)
    detection_fidelity_dark: float = Field(default=0.8, ge=0, le=1)
    heating_rate: float = Field(default=0.0, ge=0)
    recool_residual_nbar: float = Field(default=0.0, ge=0)
    pump_success: float = Field(default=1.0, ge=0, le=1)
    transfer_fidelity: float = Field(default=1.0, ge=0, le=1)
    pulse_error: float = Field(default=0.0, ge=0, le=1)

    def build(self):
        return NoiseModel(**self.model_dump())


class TimingSection(_Strict):
    transfer: float = Field(default=10e-6, ge=0)
    detect: float = Field(default=250e-6, ge=0)
    reset: float = Field(default=730e-6, ge=0)

    def build(self):
        return Timing(**self.model_dump())


class ProtocolSection(_Strict):
    name: Literal["scan", "rate", "qnd", "project", "pump"] = "scan"
    attempts_per_point: int = Field(default=100, ge=1)
    pulse_duration: float = Field(default=10e-6, gt=0)
    scan_step_hz: Optional[float] = Field(default=None, gt=0)
    scan_passes: int = Field(default=10, ge=1)
    scan_start_hz: float = Field(default=0.0, ge=0)
    scan_stop_hz: Optional[float] = Field(default=None, gt=0)
    empty_threshold: int = Field(default=30, ge=1)
    qnd_repetitions: int = Field(default=15, ge=1)
    max_sim_time: float = Field(default=2.0e4, gt=0)
    search_attempts: int = Field(default=10, ge=1)
    refine_offsets: int = Field(default=41, ge=1)
    refine_attempts: int = Field(default=8, ge=1)
    dither_ladder: Tuple[float, ...] = (1e-6, 1e-5, 1e-4, 1e-3)
    max_comb_order: int = Field(default=30000, ge=1)
    rate_durations: int = Field(default=20, ge=2)
    rate_cycles: int = Field(default=200, ge=1)
    infer_orders: bool = True
    # Protocol-specific settings.
    initial_J: Optional[int] = Field(default=None, ge=0)
    J_pair: Tuple[int, int] = (4, 2)
    J_hypothesis: int = Field(default=4, ge=0)
    J_start: int = Field(default=4, ge=0)
    sideband_rate_hz: Optional[float] = Field(default=None, gt=0)

    def build(self):
        return ProtocolConfig(
            attempts_per_point=self.attempts_per_point, pulse_duration=self.pulse_duration,
            scan_step=self.scan_step_hz, scan_passes=self.scan_passes, scan_start=TWO_PI * self.scan_start_hz,
            scan_stop=None if self.scan_stop_hz is None else TWO_PI * self.scan_stop_hz,
            empty_threshold=self.empty_threshold, qnd_repetitions=self.qnd_repetitions,
            max_sim_time=self.max_sim_time, search_attempts=self.search_attempts,
            refine_offsets=self.refine_offsets, refine_attempts=self.refine_attempts,
            dither_ladder=self.dither_ladder, max_comb_order=self.max_comb_order,
            rate_durations=self.rate_durations, rate_cycles=self.rate_cycles)


class ExperimentConfig(_Strict):
    crystal: CrystalSection = Field(default_factory=CrystalSection)
    molecule: MoleculeSection
    environment: EnvironmentSection = Field(default_factory=EnvironmentSection)
    comb: CombSection = Field(default_factory=CombSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    timing: TimingSection = Field(default_factory=TimingSection)
    protocol: ProtocolSection = Field(default_factory=ProtocolSection)
    fourier_factor: float = Field(default=1.0, gt=0)
    seed: int = Field(default=0, ge=0)
    trials: int = Field(default=1, ge=1)
    output: Optional[str] = None

    def effective(self):
        """Fully resolved configuration as plain data."""
        return json.loads(self.model_dump_json())

    def config_hash(self):
        data = self.effective()
        data.pop("output", None)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    # -- physics objects --------------------------------------------------
    def crystal_spec(self):
        c = self.crystal
        return CrystalSpec.from_amu(c.m_atom_amu, c.m_molecule_amu, c.f_atom_hz)

    def drive(self):
        return self.comb.build()

    def modes(self):
        drive = self.drive()
        return mode_structure(self.crystal_spec(), drive.k_effective)

    def rotor(self):
        return self.molecule.build()

    def environment_model(self):
        return ThermalEnvironment(self.environment.temperature, self.environment.rethermalization_time)


def _set_path(data, dotted, value):
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        if not isinstance(node.get(key, {}), dict):
            raise ConfigError(f"override {dotted}: {key} is not a section")
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError(f"override {text!r} has an empty key")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {key}: cannot parse value {raw!r}") from exc
    return key, value


def bundled_configs():
    return sorted(p.name[:-5] for p in resources.files("qlspec.data").iterdir() if p.name.endswith(".yaml"))


def read_config_text(source):
    """Text of a config file path, or of a bundled config given by name."""
    path = Path(source)
    if path.is_file():
        return path.read_text()
    name = source[:-5] if source.endswith(".yaml") else source
    candidate = resources.files("qlspec.data") / f"{name}.yaml"
    if candidate.is_file():
        return candidate.read_text()
    raise ConfigError(f"config {source!r} not found (bundled: {', '.join(bundled_configs())})")


def load_config(source=None, overrides=(), text=None):
    """Parse, apply ``key=value`` overrides, and validate."""
    if text is None:
        text = read_config_text(source)
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ConfigError(f"invalid YAML{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping at the top level")
    data = copy.deepcopy(data)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _set_path(data, key, value)
    return validate_config(data)


def validate_config(data):
    from pydantic import ValidationError
    try:
        config = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"]) or "<root>"
            lines.append(f"{loc}: {err['msg']}")
        raise ConfigError("invalid config:\n  " + "\n  ".join(lines)) from exc
    config.rotor()  # cross-field checks on the rotor model
    return config


def dump_effective(config):
    return yaml.safe_dump(config.effective(), sort_keys=True, default_flow_style=False)
