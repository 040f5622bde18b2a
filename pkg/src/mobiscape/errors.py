"""Exception hierarchy shared by every stage.

Each class carries a short ``code`` so the CLI can print one machine-parsable
line per failure.
"""


class MobiscapeError(Exception):
    code = "Error"


class FileUnreadable(MobiscapeError, OSError):
    code = "FileUnreadable"


class HeaderMismatch(MobiscapeError, ValueError):
    code = "HeaderMismatch"


class OrphanTrip(MobiscapeError, ValueError):
    code = "OrphanTrip"

    def __init__(self, person_id: str):
        super().__init__(f"trip references unknown person {person_id!r}")
        self.person_id = person_id


class AllZeroCounts(MobiscapeError, ValueError):
    code = "AllZeroCounts"


class ZeroVector(MobiscapeError, ValueError):
    code = "ZeroVector"


class ZoneMismatch(MobiscapeError, ValueError):
    code = "ZoneMismatch"


class BinningMismatch(MobiscapeError, ValueError):
    code = "BinningMismatch"


class NoCommuters(MobiscapeError, ValueError):
    code = "NoCommuters"


class NoAnchor(MobiscapeError, ValueError):
    code = "NoAnchor"


class InfeasibleBounds(MobiscapeError, ValueError):
    code = "InfeasibleBounds"


class DegenerateGroups(MobiscapeError, ValueError):
    code = "DegenerateGroups"


class UnmappablePerson(MobiscapeError, ValueError):
    code = "UnmappablePerson"


class SchemeMismatch(MobiscapeError, ValueError):
    code = "SchemeMismatch"


class DanglingPersonId(MobiscapeError, KeyError):
    code = "DanglingPersonId"

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else self.code


class ConfigInvalid(MobiscapeError, ValueError):
    code = "ConfigInvalid"
