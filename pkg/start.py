#!/usr/bin/env python3
"""
Launcher for the Semantic-Style Fusion Engine
"""

import sys

from stylefusion.main import main

if __name__ == "__main__":
    # e.g. python start.py verify-propositions --config config.json --out results
    sys.exit(main())
