from pydantic_settings import BaseSettings
from typing import Optional

class Settings(BaseSettings):
    # Reproducibility
    seed: Optional[int] = None  # SIM_SEED overrides every config's master seed

    # Logging
    log_level: str = "INFO"

    # Output Configuration
    output_dir: str = "runs"
    jobs: int = 1

    # Covariance Maintenance
    refresh_every: int = 1000  # full Cholesky refresh period (rank-1 updates)
    inverse_tolerance: float = 1e-8

    # Model Validation
    transition_tolerance: float = 1e-6
    clamp_tolerance: float = 1e-12
    reward_tolerance: float = 1e-9
    weights_tolerance: float = 1e-9

    class Config:
        env_prefix = "SIM_"
        env_file = ".env"
        extra = "ignore"

settings = Settings()
