import os
import pathlib
import sys

TOOLS = pathlib.Path(os.environ.get("EFFISEGNET_TOOLS_DIR", pathlib.Path(__file__).resolve().parents[2] / "tools"))
sys.path.insert(0, str(TOOLS))
