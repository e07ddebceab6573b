def _rebuild(cls, args, state):
    err = cls.__new__(cls)
    err.args = args
    err.__dict__.update(state)
    return err

class RewardGenError(Exception):

    def __init__(self, msg: str, location=None):
        if location is not None:
            self.message = msg + f' at {location}'
        else:
            self.message = msg
        self.location = location
        self.reason = msg
        super().__init__(self.message)

    def __reduce__(self):
        # subclass constructors differ from self.args; restore the attributes directly
        return (_rebuild, (type(self), self.args, self.__dict__))

class ConfigurationError(RewardGenError):
    """ A run, world or backend configuration is invalid """
    pass

class InputError(RewardGenError):
    """ An argument violates a precondition (non-finite value, shape mismatch, ...) """
    pass

class DegenerateFormationError(RewardGenError):
    """ A node of the formation graph has zero degree: its agent coincides with all neighbours """
    pass
