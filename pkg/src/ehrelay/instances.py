"""Named small instances used by the oracles, the tests and the CLI."""
from __future__ import annotations

from .model import SystemParams
from .stochastic import ChannelModel


def tiny_instance(arrival: float = 0.4, harvest: float = 0.25) -> tuple[SystemParams, ChannelModel]:
    """Two relays, N_B=2, N_E=2, two channel bins, actions {0, 1}.

    The packet size is chosen so that one transmitting relay serves one or two
    packets depending on the channel bins, which keeps the control problem
    non-trivial at this size.
    """
    params = SystemParams.symmetric(num_relays=2, battery_capacity=2, mean_harvest=harvest,
                                    power_levels=(0.0, 1.0), buffer_capacity=2, packet_size=1250.0,
                                    mean_arrival=arrival)
    return params, ChannelModel(boundaries_db=(0.0,))


def desk_instance(num_relays: int = 3, battery: int = 2, harvest: float = 0.25, arrival: float = 0.6,
                  buffer: int = 4) -> tuple[SystemParams, ChannelModel]:
    """A few relays with the same service scaling as the tiny instance."""
    params = SystemParams.symmetric(num_relays=num_relays, battery_capacity=battery, mean_harvest=harvest,
                                    power_levels=tuple(float(a) for a in range(battery + 1)),
                                    buffer_capacity=buffer, packet_size=1250.0, mean_arrival=arrival)
    return params, ChannelModel(boundaries_db=(0.0,))
