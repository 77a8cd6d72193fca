"""
ringslip - space-time finite element flow solver with a virtual-ring
shear-slip mesh update for periodically moving mesh blocks.
"""

__version__ = "0.1.0"
