"""Multi-seed Van der Pol benchmark on a short training budget.

Same protocol as run_toy.py but on the limit-cycle plant, where the
polynomial dictionary cannot close the dynamics and the correction policy
has to absorb the phase drift the linear part accumulates.
"""

import sys

from run_toy import main

if __name__ == "__main__":
    sys.exit(main(["--preset", "vanderpol"] + sys.argv[1:]))
