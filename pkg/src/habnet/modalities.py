"""The twelve datacube modalities and their source products."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Modality:
    index: int
    name: str
    product: str | None  # CMR short name; None for derived/static layers
    variable: str | None
    reflectance_dependent: bool


MODALITIES = (
    Modality(1, "bathymetry", None, "elevation", False),
    Modality(2, "chla_bimonthly", None, "chlor_a", False),
    Modality(3, "chla_aqua", "MODISA_L2_OC", "chlor_a", True),
    Modality(4, "rrs412", "MODISA_L2_OC", "Rrs_412", True),
    Modality(5, "rrs443", "MODISA_L2_OC", "Rrs_443", True),
    Modality(6, "rrs488", "MODISA_L2_OC", "Rrs_488", True),
    Modality(7, "rrs531", "MODISA_L2_OC", "Rrs_531", True),
    Modality(8, "rrs555", "MODISA_L2_OC", "Rrs_555", True),
    Modality(9, "par", "MODISA_L2_OC", "par", False),
    Modality(10, "sst", "MODISA_L2_SST", "sst", True),
    Modality(11, "chla_terra", "MODIST_L2_OC", "chlor_a", True),
    Modality(12, "chla_anomaly", None, None, False),
)

BY_INDEX = {m.index: m for m in MODALITIES}
ALL = tuple(m.index for m in MODALITIES)
N_MODALITIES = len(MODALITIES)

BATHYMETRY = 1
CHLA_BIMONTHLY = 2
CHLA = 3
RRS443 = 5
RRS488 = 6
RRS531 = 7
RRS555 = 8
PAR = 9
SST = 10
CHLA_TERRA = 11
CHLA_ANOMALY = 12

# bands used for the spectral-shape baseline, nm
BAND_WAVELENGTH = {4: 412.0, 5: 443.0, 6: 488.0, 7: 531.0, 8: 555.0}

# modalities retained after the feature-importance analysis
IMPORTANT_SUBSET = (1, 2, 3, 9, 11)


def parse_modality_list(text):
    """Parse ``"1,2,3"`` or ``"all"`` into a tuple of modality indices."""
    if text is None or text.strip().lower() == "all":
        return ALL
    out = tuple(int(tok) for tok in text.split(",") if tok.strip())
    for m in out:
        if m not in BY_INDEX:
            raise ValueError(f"unknown modality {m}")
    return out
