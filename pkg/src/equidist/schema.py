"""CSV schemas for tract and monitor tables (schema version 1).

Each field is ``(name, kind, required)``. Kinds: ``id`` (kept as text),
``float``, ``int``, ``bool`` (0/1/true/false).
"""

SCHEMA_VERSION = 1

TRACT_FIELDS = [
    ("tract_id", "id", True),
    ("county_id", "id", True),
    ("state_id", "id", True),
    ("epa_region", "int", False),
    ("lat", "float", True),
    ("lon", "float", True),
    ("population", "int", True),
    ("area_km2", "float", False),
    ("urban", "bool", True),
    ("prop_aian", "float", True),
    ("prop_asian", "float", True),
    ("prop_black", "float", True),
    ("prop_hispanic", "float", True),
    ("prop_white", "float", True),
    ("prop_nonwhite", "float", False),
    ("prop_poverty", "float", True),
    ("median_income", "float", False),
    ("pm25", "float", False),
    # filled by the distance step, or supplied directly
    ("distance_m", "float", False),
    ("nearest_monitor_id", "id", False),
    ("distance_county_m", "float", False),
    ("county_monitor_id", "id", False),
    ("log_distance", "float", False),
    ("log_distance_county", "float", False),
]

MONITOR_FIELDS = [
    ("monitor_id", "id", True),
    ("county_id", "id", True),
    ("state_id", "id", False),
    ("lat", "float", True),
    ("lon", "float", True),
    ("active", "bool", False),
]

DEMOGRAPHIC_COLUMNS = ("prop_aian", "prop_asian", "prop_black", "prop_hispanic",
                       "prop_white", "prop_poverty", "median_income")

PROPORTION_COLUMNS = ("prop_aian", "prop_asian", "prop_black", "prop_hispanic",
                      "prop_white", "prop_nonwhite", "prop_poverty")

# EPA administrative regions keyed by two-digit state FIPS code
STATE_FIPS_TO_EPA_REGION = {
    "09": 1, "23": 1, "25": 1, "33": 1, "44": 1, "50": 1,
    "34": 2, "36": 2, "72": 2, "78": 2,
    "10": 3, "11": 3, "24": 3, "42": 3, "51": 3, "54": 3,
    "01": 4, "12": 4, "13": 4, "21": 4, "28": 4, "37": 4, "45": 4, "47": 4,
    "17": 5, "18": 5, "26": 5, "27": 5, "39": 5, "55": 5,
    "05": 6, "22": 6, "35": 6, "40": 6, "48": 6,
    "19": 7, "20": 7, "29": 7, "31": 7,
    "08": 8, "30": 8, "38": 8, "46": 8, "49": 8, "56": 8,
    "04": 9, "06": 9, "15": 9, "32": 9,
    "02": 10, "16": 10, "41": 10, "53": 10,
}


def field_names(fields):
    return [f[0] for f in fields]
