"""
IEEE 39-bus (New England) system with its ten machines replaced by converters

Topology, branch data, loads and dispatch are the standard case on a
100 MVA / 60 Hz base. The machine buses 30-39 alternate by ascending bus
number between grid-forming (lowest first) and grid-following units:
GFM at 30, 32, 34, 36, 38 and GFL at 31, 33, 35, 37, 39. Bus 31 is the slack.
"""

from typing import Optional

from devices import Event, GflConverter, GfmVsm, LoadModel
from dynsim import IntegratorConfig
from netmodel import Branch, Bus, Network
from scenario import CaseScenario, Dispatch, MetricsConfig

BASE_MVA = 100.0
SLACK_BUS = 31
CONVERTER_RATING_MVA = 1000.0

# Control settings of the converters in this case, on their own rating.
# Every control loop has a time constant of 25 ms or more.
GFM_SETTINGS = dict(inertia_h=5.0, damping_d=1.0, freq_droop_gain=9.0, volt_droop_gain=0.5, avr_time_const=0.1)
GFL_SETTINGS = dict(freq_droop_gain=5.0, volt_droop_gain=2.0, pll_kp=0.1, pll_ki=2.0, current_lag_t=0.05)

# from, to, r, x, b, tap (0 = line)
BRANCHES = [
    (1, 2, 0.0035, 0.0411, 0.6987, 0),
    (1, 39, 0.0010, 0.0250, 0.7500, 0),
    (2, 3, 0.0013, 0.0151, 0.2572, 0),
    (2, 25, 0.0070, 0.0086, 0.1460, 0),
    (2, 30, 0.0000, 0.0181, 0.0000, 1.025),
    (3, 4, 0.0013, 0.0213, 0.2214, 0),
    (3, 18, 0.0011, 0.0133, 0.2138, 0),
    (4, 5, 0.0008, 0.0128, 0.1342, 0),
    (4, 14, 0.0008, 0.0129, 0.1382, 0),
    (5, 6, 0.0002, 0.0026, 0.0434, 0),
    (5, 8, 0.0008, 0.0112, 0.1476, 0),
    (6, 7, 0.0006, 0.0092, 0.1130, 0),
    (6, 11, 0.0007, 0.0082, 0.1389, 0),
    (6, 31, 0.0000, 0.0250, 0.0000, 1.070),
    (7, 8, 0.0004, 0.0046, 0.0780, 0),
    (8, 9, 0.0023, 0.0363, 0.3804, 0),
    (9, 39, 0.0010, 0.0250, 1.2000, 0),
    (10, 11, 0.0004, 0.0043, 0.0729, 0),
    (10, 13, 0.0004, 0.0043, 0.0729, 0),
    (10, 32, 0.0000, 0.0200, 0.0000, 1.070),
    (12, 11, 0.0016, 0.0435, 0.0000, 1.006),
    (12, 13, 0.0016, 0.0435, 0.0000, 1.006),
    (13, 14, 0.0009, 0.0101, 0.1723, 0),
    (14, 15, 0.0018, 0.0217, 0.3660, 0),
    (15, 16, 0.0009, 0.0094, 0.1710, 0),
    (16, 17, 0.0007, 0.0089, 0.1342, 0),
    (16, 19, 0.0016, 0.0195, 0.3040, 0),
    (16, 21, 0.0008, 0.0135, 0.2548, 0),
    (16, 24, 0.0003, 0.0059, 0.0680, 0),
    (17, 18, 0.0007, 0.0082, 0.1319, 0),
    (17, 27, 0.0013, 0.0173, 0.3216, 0),
    (19, 20, 0.0007, 0.0138, 0.0000, 1.060),
    (19, 33, 0.0007, 0.0142, 0.0000, 1.070),
    (20, 34, 0.0009, 0.0180, 0.0000, 1.009),
    (21, 22, 0.0008, 0.0140, 0.2565, 0),
    (22, 23, 0.0006, 0.0096, 0.1846, 0),
    (22, 35, 0.0000, 0.0143, 0.0000, 1.025),
    (23, 24, 0.0022, 0.0350, 0.3610, 0),
    (23, 36, 0.0005, 0.0272, 0.0000, 0),
    (25, 26, 0.0032, 0.0323, 0.5310, 0),
    (25, 37, 0.0006, 0.0232, 0.0000, 1.025),
    (26, 27, 0.0014, 0.0147, 0.2396, 0),
    (26, 28, 0.0043, 0.0474, 0.7802, 0),
    (26, 29, 0.0057, 0.0625, 1.0290, 0),
    (28, 29, 0.0014, 0.0151, 0.2490, 0),
    (29, 38, 0.0008, 0.0156, 0.0000, 1.025),
]

# bus: (MW, Mvar)
LOADS = {
    1: (97.6, 44.2),
    3: (322.0, 2.4),
    4: (500.0, 184.0),
    7: (233.8, 84.0),
    8: (522.0, 176.6),
    9: (6.5, -66.6),
    12: (8.53, 88.0),
    15: (320.0, 153.0),
    16: (329.0, 32.3),
    18: (158.0, 30.0),
    20: (680.0, 103.0),
    21: (274.0, 115.0),
    23: (247.5, 84.6),
    24: (308.6, -92.2),
    25: (224.0, 47.2),
    26: (139.0, 17.0),
    27: (281.0, 75.5),
    28: (206.0, 27.6),
    29: (283.5, 26.9),
    31: (9.2, 4.6),
    39: (1104.0, 250.0),
}

# bus: (MW, voltage set point); the slack entry is recomputed by the power flow
GENERATORS = {
    30: (250.0, 1.0499),
    31: (677.871, 0.9820),
    32: (650.0, 0.9841),
    33: (632.0, 0.9972),
    34: (508.0, 1.0123),
    35: (650.0, 1.0494),
    36: (560.0, 1.0636),
    37: (540.0, 1.0275),
    38: (830.0, 1.0265),
    39: (1000.0, 1.0300),
}

OUTAGE_BUS = 8
OUTAGE_TIME = 1.0


def build_network() -> Network:
    buses = [Bus(id=bus_id) for bus_id in range(1, 40)]
    branches = [
        Branch(
            from_bus=f,
            to_bus=t,
            resistance_r=r,
            reactance_x=x,
            charging_b=b,
            tap_ratio=tap or 1.0,
        )
        for f, t, r, x, b, tap in BRANCHES
    ]
    return Network(buses=buses, branches=branches, base_mva=BASE_MVA, base_frequency=60.0)


def build_ieee39_ibr(rx_ratio: Optional[float] = None, t_end: float = 40.0,
                     with_outage: bool = True) -> CaseScenario:
    """The converter-based 39-bus scenario with the bus-8 load outage at 1 s"""
    gfm, gfl = [], []
    for position, bus in enumerate(sorted(GENERATORS)):
        if position % 2 == 0:
            gfm.append(GfmVsm(name=f"gfm_{bus}", bus=bus, rating_mva=CONVERTER_RATING_MVA, **GFM_SETTINGS))
        else:
            gfl.append(GflConverter(name=f"gfl_{bus}", bus=bus, rating_mva=CONVERTER_RATING_MVA, **GFL_SETTINGS))

    loads = [LoadModel(bus=bus, p0=mw / BASE_MVA, q0=mvar / BASE_MVA) for bus, (mw, mvar) in LOADS.items()]
    dispatch = [Dispatch(bus=bus, p=mw / BASE_MVA, v_set=v) for bus, (mw, v) in sorted(GENERATORS.items())]
    events = [Event(time=OUTAGE_TIME, kind="load-outage", target=OUTAGE_BUS)] if with_outage else []

    return CaseScenario(
        label="ieee39_ibr",
        network=build_network(),
        slack_bus=SLACK_BUS,
        dispatch=dispatch,
        gfm=gfm,
        gfl=gfl,
        loads=loads,
        events=events,
        integrator=IntegratorConfig(t_end=t_end),
        metrics=MetricsConfig(),
        rx_ratio=rx_ratio,
        rx_include_transformers=False,
        labels={
            "source": "IEEE 39-bus New England system, standard branch, load and dispatch data",
            "converters": "machines at buses 30-39 replaced, alternating GFM/GFL by ascending bus (30 is GFM)",
            "dispatch": "standard machine dispatch reused; converter ratings 1000 MVA",
            "controls": "GFM H=5 D=1 kf=9 kv=0.5 ta=0.1 s; GFL kf=5 kv=2 PLL kp=0.1 ki=2 tc=0.05 s",
            "rx_ratio": "R/X override applies to lines only; transformers keep their data",
        },
    )
