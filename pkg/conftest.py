import os
import sys

import hypothesis
import numpy as np

root_path = os.path.dirname(os.path.abspath(__file__))
for sub in ('simulation', 'optimization', 'experiments'):
    sub_path = os.path.join(root_path, sub)
    if sub_path not in sys.path:
        sys.path.insert(0, sub_path)

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=25, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))
