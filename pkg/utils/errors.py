'''
Error hierarchy shared by every stage.

Each family carries the process exit code the CLI reports for it.
'''


class VdminiError(Exception):
    exit_code = 1
    kind = 'error'


class ConfigError(VdminiError):
    exit_code = 2
    kind = 'config'


class PrerequisiteError(VdminiError):
    exit_code = 3
    kind = 'prerequisite'


class NumericError(VdminiError):
    exit_code = 4
    kind = 'numeric'


class FileFormatError(VdminiError):
    # Corrupt/incompatible artifacts are a broken prerequisite for the stage reading them
    exit_code = 3
    kind = 'format'


class ChecksumError(FileFormatError):
    pass


class TruncatedFileError(FileFormatError):
    pass


class VersionError(FileFormatError):
    pass


class NonFiniteLossError(NumericError):
    def __init__(self, term, value=None):
        self.term = term
        super(NonFiniteLossError, self).__init__('non-finite %s loss%s' % (
            term, '' if value is None else ' (%r)' % value))
