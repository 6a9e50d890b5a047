"""Benchmark domains; importing this package registers them by name."""
from pardespot.domains.chain import ChainModel, chain_model
from pardespot.domains.driving import DrivingModel, driving_model
from pardespot.domains.mars import MarsModel, mars_model
from pardespot.domains.navigation import NavigationModel, navigation_model
from pardespot.domains.tiger import TigerModel, tiger_model

__all__ = [
    "ChainModel", "DrivingModel", "MarsModel", "NavigationModel", "TigerModel",
    "chain_model", "driving_model", "mars_model", "navigation_model", "tiger_model",
]
