"""Loss networks with advance reservation: blocking analysis, admission
policies, pricing and simulation."""

__version__ = "0.1.0"
