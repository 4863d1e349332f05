from dotenv import load_dotenv
from pydantic_settings import BaseSettings, SettingsConfigDict

load_dotenv()


class Config(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="NELSON_LAB_")

    app_name: str = "NelsonLab"
    debug: bool = False
    log_level: str = "INFO"
    workers: int = 1
    output_dir: str = "runs"
    bootstrap_resamples: int = 500
    # Relative floors: p <= density_floor * max(p) and |psi| <= psi_floor * max|psi|
    # are treated as zero density.
    density_floor: float = 1e-12
    # Half-width of the box searched for the peak of an exact density.
    density_search_span: float = 10.0
    psi_floor: float = 1e-6

    @property
    def effective_log_level(self) -> str:
        return "DEBUG" if self.debug else self.log_level.upper()


config = Config()
