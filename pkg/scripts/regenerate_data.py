"""Rewrite src/dpiprint/data from the generator."""

from pathlib import Path

from dpiprint.generate import write_builtin_data

if __name__ == "__main__":
    write_builtin_data(Path(__file__).resolve().parent.parent / "src" / "dpiprint" / "data")
