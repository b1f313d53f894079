"""Version stamp shared by every JSON file slip reads or writes.

The number moves in lockstep with the wire protocol version, so a strategy,
hardware, network or report file can be matched to the frames it belongs to.
"""

SCHEMA_VERSION = 1
KEY = "schema_version"


def stamp(data: dict) -> dict:
    return {KEY: SCHEMA_VERSION, **data}


def unstamp(data: dict) -> dict:
    """Drop the version key, rejecting files written for another version.

    Files without the key are accepted as the current version.
    """
    data = dict(data)
    version = data.pop(KEY, SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"file has schema version {version}, this build reads {SCHEMA_VERSION}")
    return data
