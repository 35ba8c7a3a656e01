import os
import sys

# make the sibling oracle helpers importable from any invocation dir
sys.path.insert(0, os.path.dirname(__file__))
