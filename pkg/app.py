"""
Punto de entrada de línea de comandos.

    python app.py verify all --config configs/two_vertex.json --out runs/r1
    python app.py density nu --config configs/two_vertex.json --beta 0.5,0.5
"""
import os
import sys

# Ensure the app directory is on the path for local imports
APP_DIR = os.path.dirname(os.path.abspath(__file__))
if APP_DIR not in sys.path:
    sys.path.insert(0, APP_DIR)

from interacting_bridges.cli import dispatch  # noqa: E402


if __name__ == "__main__":
    sys.exit(dispatch(sys.argv[1:]))
