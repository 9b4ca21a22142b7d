"""Environment settings, read from an optional .env file."""
import os
from dotenv import load_dotenv, find_dotenv

load_dotenv(find_dotenv(usecwd=True))

# Path to the SQLite database holding the experiment log
EXPERIMENTS_DB = os.environ.get("MELES_EXPERIMENTS_DB", "experiments.db")

# Run the array core in 64-bit mode (used for gradient checks)
FLOAT64 = os.environ.get("MELES_FLOAT64", "0") == "1"
