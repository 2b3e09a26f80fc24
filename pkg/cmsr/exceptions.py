class CMSRError(Exception):
    pass


class InvalidArgument(CMSRError, ValueError):
    pass


class UnsupportedScale(InvalidArgument):
    pass


class MissingFiles(InvalidArgument):
    """
    Raised with every missing path of a manifest at once, so an operator can
    fix them in one pass.
    """
    def __init__(self, paths):
        self.paths = list(paths)
        super(MissingFiles, self).__init__(
            "missing files: %s" % ", ".join(self.paths))


class NumericFailure(CMSRError, ArithmeticError):
    """
    A non-finite value showed up. "layer" is the index of the network layer
    that produced it (when known), "tensor" names the offending tensor.
    """
    def __init__(self, message, layer=None, tensor=None):
        super(NumericFailure, self).__init__(message)
        self.layer = layer
        self.tensor = tensor


class Divergence(NumericFailure):
    pass


class CorruptModel(CMSRError):
    def __init__(self, message, record=None):
        super(CorruptModel, self).__init__(message)
        self.record = record


class EmptyMask(CMSRError):
    pass
