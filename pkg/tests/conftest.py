import sys
from pathlib import Path

# allow tests to import the shared oracle/gradcheck helpers as plain modules
sys.path.insert(0, str(Path(__file__).parent))
