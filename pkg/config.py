import os

SECRET_TOKEN = os.getenv("SECRET_TOKEN", "your_secret_token")

# Run registry (sqlite). Unset means finished runs are not recorded.
RUNS_DB_PATH = os.getenv("RUNS_DB_PATH") or None

RUNS_DIR = os.getenv("RUNS_DIR", "runs")
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
