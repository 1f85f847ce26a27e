"""
Process-level settings read from the environment
"""
import os
from dotenv import load_dotenv

load_dotenv()

OUTPUT_DIR = os.getenv("FEDSILO_OUTPUT_DIR", "runs")
LOG_LEVEL = os.getenv("FEDSILO_LOG_LEVEL", "INFO")
MAX_WORKERS = int(os.getenv("FEDSILO_MAX_WORKERS", "1"))

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
