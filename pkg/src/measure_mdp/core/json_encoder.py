"""Custom JSON encoder for numpy values, enums and result objects."""
import datetime
import json
from enum import Enum

import numpy as np


class CustomJSONEncoder(json.JSONEncoder):
    """Custom JSON encoder to handle numpy values and other non-serializable types."""

    def default(self, o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        elif isinstance(o, np.integer):
            return int(o)
        elif isinstance(o, np.floating):
            return float(o)
        elif isinstance(o, np.bool_):
            return bool(o)
        elif isinstance(o, Enum):
            return o.value
        elif isinstance(o, (datetime.datetime, datetime.date, datetime.time)):
            return o.isoformat()
        elif hasattr(o, "to_dict"):
            return o.to_dict()
        return super(CustomJSONEncoder, self).default(o)


def dumps(payload) -> str:
    """Serialize with a fixed layout so reruns are byte-identical."""
    return json.dumps(payload, indent=2, sort_keys=True, cls=CustomJSONEncoder) + "\n"
