import sys
from pathlib import Path

# test-local helpers (gradcheck, shared fixtures) import as plain modules
sys.path.insert(0, str(Path(__file__).parent))
