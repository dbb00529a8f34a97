"""
Legal Markets Lab - Core Configuration Module
Process settings from the environment, logging setup and the sectioned run-config format
"""

import logging
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Type, Union

from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from exceptions import ConfigError
from fe_regress import FeDimension, RegressionSpec
from gmm_estimator import DETREND_CONTROLS, NAMED_SETS, GmmSpec
from model_core import Calibration, DemandParams, ModelParamsClassic, ModelParamsGmm, calibrate_gmm
from panel_synth import SynthConfig


class Settings(BaseSettings):
    """Process-level settings (environment variables prefixed LEGALMKT_, or .env)"""

    log_level: str = "INFO"
    log_file: str = ""
    output_dir: str = "runs"
    default_seed: int = 20240101
    plots_enabled: bool = False

    model_config = SettingsConfigDict(env_prefix="LEGALMKT_", env_file=".env", case_sensitive=False, extra="ignore")


# Global settings instance
settings = Settings()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_logging(current: Optional[Settings] = None) -> None:
    """Stream handler always, file handler when log_file is set"""
    current = current or settings
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if current.log_file:
        handlers.append(logging.FileHandler(current.log_file))
    logging.basicConfig(
        level=getattr(logging, current.log_level.upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


logger = logging.getLogger(__name__)


def _split(value: Any) -> Any:
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(",") if part.strip())
    return value


def _split_semicolons(value: Any) -> Any:
    if isinstance(value, str):
        return tuple(part.strip() for part in value.split(";") if part.strip())
    return value


CsvStrings = Annotated[Tuple[str, ...], BeforeValidator(_split)]
CsvFloats = Annotated[Tuple[float, ...], BeforeValidator(_split)]
CsvInts = Annotated[Tuple[int, ...], BeforeValidator(_split)]
CsvDimensions = Annotated[Tuple[FeDimension, ...], BeforeValidator(_split)]
SemicolonStrings = Annotated[Tuple[str, ...], BeforeValidator(_split_semicolons)]


class Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class ModelSection(Section):
    """Calibration targets and structural parameters for both parameterizations"""

    mu_skill_share: float = Field(0.42, gt=0, lt=1)
    wage_premium: float = Field(2.40, gt=0)
    subst_elasticity: float = Field(1.4, gt=0)
    inv_rho_s: float = Field(0.0853, gt=0)
    inv_rho_u: float = Field(0.264, gt=0)
    alpha: float = Field(1.293, gt=0)
    sigma_curv: float = Field(2.0, gt=0)
    beta_disc: float = Field(0.96, gt=0, lt=1)
    gamma_disutility: float = Field(1.0, gt=0)
    a_s: float = Field(2.0, gt=0)
    a_u: float = Field(1.0, gt=0)

    def calibration(self) -> Calibration:
        return calibrate_gmm(self.mu_skill_share, self.wage_premium, self.subst_elasticity)

    def gmm_params(self) -> ModelParamsGmm:
        calib = self.calibration()
        return ModelParamsGmm(zeta=calib.zeta, share_lambda=calib.share_lambda, a_rel=self.wage_premium,
                              alpha=self.alpha, rho_s=1.0 / self.inv_rho_s, rho_u=1.0 / self.inv_rho_u,
                              sigma_curv=self.sigma_curv, beta_disc=self.beta_disc,
                              gamma_disutility=self.gamma_disutility)

    def classic_params(self) -> ModelParamsClassic:
        return ModelParamsClassic(gamma_disutility=self.gamma_disutility, rho_s=1.0 / self.inv_rho_s,
                                  rho_u=1.0 / self.inv_rho_u, delta=self.subst_elasticity, a_s=self.a_s,
                                  a_u=self.a_u, sigma_curv=self.sigma_curv, beta_disc=self.beta_disc)


class RegressSection(Section):
    """Reduced-form employment regression, placebo lags, lincoms and the delta back-out"""

    outcome: str = "ln_emp_legal"
    treatments: CsvStrings = ("n_br", "n_fs")
    controls: CsvStrings = ("ln_population", "ln_emp_nonlegal")
    absorb: CsvDimensions = ("county", "district_year")
    cluster_by: FeDimension = "county"
    lags: CsvInts = (1, 2, 3)
    lincoms: SemicolonStrings = ("n_br + n_fs", "1.703*n_br + 0.470*n_fs")
    estimate_delta: bool = True

    def spec(self) -> RegressionSpec:
        return RegressionSpec(outcome=self.outcome, treatments=self.treatments, controls=self.controls,
                              absorb=self.absorb, cluster_by=self.cluster_by, lincoms=self.lincoms)

    def placebo_specs(self) -> List[RegressionSpec]:
        """One specification per single lag, then one with every lag together when there are several"""
        base = self.spec().model_copy(update={"lincoms": ()})
        positive = sorted({lag for lag in self.lags if lag > 0})
        structures = [(lag,) for lag in positive]
        if len(positive) > 1:
            structures.append(tuple(positive))
        return [base.model_copy(update={"lags": lags}) for lags in structures]


class GmmSection(Section):
    """Instrument choice, detrending and the optimizer cross-check"""

    instruments: Literal["baseline", "no_constant", "with_constant", "simplified", "custom"] = "baseline"
    wage_instruments: CsvStrings = ()
    labor_instruments: CsvStrings = ()
    include_constant_wage: bool = False
    include_constant_labor: bool = True
    detrend_controls: CsvStrings = DETREND_CONTROLS
    detrend_absorb: CsvDimensions = ()
    numeric_check: bool = True

    def spec(self, calibration: Calibration) -> GmmSpec:
        if self.instruments in NAMED_SETS:
            return GmmSpec.named(self.instruments, calibration.zeta, calibration.pi_share)
        return GmmSpec(wage_instruments=self.wage_instruments, labor_instruments=self.labor_instruments,
                       include_constant_wage=self.include_constant_wage,
                       include_constant_labor=self.include_constant_labor,
                       zeta=calibration.zeta, pi_share=calibration.pi_share)


class WelfareSection(Section):
    sigmas: CsvFloats = (2.0, 0.5)
    weighting: Literal["county", "employment"] = "county"
    horizon: Optional[int] = Field(None, ge=0)
    wage_unskilled_0: float = Field(1.0, gt=0)


class IoSection(Section):
    panel: str = "panel.csv"
    coefficients: str = "coefficients.csv"
    seed: Optional[int] = Field(None, ge=0, lt=2 ** 64)
    plots: bool = False


class MonteCarloSection(Section):
    experiment: Literal["reduced_form", "gmm"] = "reduced_form"
    replications: int = Field(200, gt=0)
    workers: int = Field(1, gt=0)


class RunConfig(Section):
    """Every section of a run configuration, defaults filled"""

    simulate: SynthConfig = SynthConfig()
    model: ModelSection = ModelSection()
    demand: DemandParams = DemandParams()
    regress: RegressSection = RegressSection()
    gmm: GmmSection = GmmSection()
    welfare: WelfareSection = WelfareSection()
    io: IoSection = IoSection()
    montecarlo: MonteCarloSection = MonteCarloSection()

    @property
    def seed(self) -> int:
        return self.io.seed if self.io.seed is not None else self.simulate.rng_seed

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Resolve the single seed: explicit override, then [io] seed, then [simulate] rng_seed"""
        resolved = seed if seed is not None else self.seed
        simulate = SynthConfig(**{**self.simulate.model_dump(), "rng_seed": resolved})
        io = self.io.model_copy(update={"seed": resolved})
        return self.model_copy(update={"simulate": simulate, "io": io})


SECTIONS: Dict[str, Type[BaseModel]] = {name: info.annotation for name, info in RunConfig.model_fields.items()}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

def _strip_comment(line: str) -> str:
    return line.split("#", 1)[0].strip()


def parse_config_text(text: str, path: str = "<config>") -> RunConfig:
    """
    Parse `[section]` / `key = value` text into a validated RunConfig

    Errors name the file and the line of the offending key or section header.
    """
    values: Dict[str, Dict[str, str]] = {}
    key_lines: Dict[Tuple[str, str], int] = {}
    header_lines: Dict[str, int] = {}
    section: Optional[str] = None

    for number, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SECTIONS)}", path, number)
            if section in header_lines:
                raise ConfigError(f"section [{section}] appears twice", path, number)
            header_lines[section] = number
            values[section] = {}
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, number)
        if section is None:
            raise ConfigError("key outside of any [section]", path, number)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", path, number)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r} in [{section}]", path, number)
        values[section][key] = value
        key_lines[(section, key)] = number

    built: Dict[str, BaseModel] = {}
    for name, entries in values.items():
        model = SECTIONS[name]
        try:
            built[name] = model.model_validate(entries)
        except ValidationError as e:
            error = e.errors()[0]
            loc = error.get("loc", ())
            key = str(loc[0]) if loc else ""
            line = key_lines.get((name, key), header_lines[name])
            label = f"[{name}] {key}" if key else f"[{name}]"
            raise ConfigError(f"{label}: {error.get('msg', 'invalid value')}", path, line) from None

    try:
        config = RunConfig(**built)
    except ValidationError as e:
        raise ConfigError(str(e.errors()[0].get("msg", "invalid configuration")), path) from None
    logger.debug(f"Parsed run config {path} with sections {', '.join(values) or '(none)'}")
    return config


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Load a run-config file; None yields all defaults"""
    if path is None:
        return RunConfig()
    source = Path(path)
    try:
        text = source.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {source}") from None
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config file {source}: {e}") from e
    return parse_config_text(text, str(source))


def _render(value: Any, separator: str = ", ") -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return separator.join(_render(v) for v in value)
    return str(value)


def dump_run_config(config: RunConfig) -> str:
    """Render the fully-resolved configuration in the run-config format"""
    lines: List[str] = []
    for name in SECTIONS:
        section = getattr(config, name)
        lines.append(f"[{name}]")
        for key in type(section).model_fields:
            value = getattr(section, key)
            if value is None:
                continue
            if isinstance(value, tuple) and not value:
                lines.append(f"{key} =")
                continue
            separator = "; " if key == "lincoms" else ", "
            lines.append(f"{key} = {_render(value, separator)}")
        lines.append("")
    return "\n".join(lines)
