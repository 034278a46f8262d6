"""Module entry point: ``python -m exlab`` behaves like the ``exlab`` script."""

from exlab.cli import main

if __name__ == "__main__":
    raise SystemExit(main())
