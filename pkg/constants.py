"""Shared constants for the twin-image EPR toolkit."""

TOOL_VERSION = "0.4.0"

# Planes and roles as they appear in file names
PLANE_NAMES = ("near", "far")
ROLE_SIGNAL = "signal"
ROLE_IDLER = "idler"

# Run directory layout
FRAME_FILE_PATTERN = "{plane}_{role}_{index:04d}.pgm"
ENSEMBLE_SIDECAR_PATTERN = "{plane}_ensemble.json"
ANALYSIS_CSV_PATTERN = "{plane}_analysis.csv"
PROFILES_CSV_PATTERN = "{plane}_profiles.csv"
WIDTHS_CSV_PATTERN = "{plane}_widths.csv"
MAPS_DIR = "maps"
ACCUMULATED_REPORT_PATTERN = "{plane}_accumulated.json"
MANIFEST_FILE = "manifest.json"
REPORT_FILE = "report.json"
EPR_REPORT_FILE = "epr_report.json"
EPR_PRODUCTS_FILE = "epr_products.csv"
SWEEP_FILE = "sweep.csv"

# Analysis defaults
DEFAULT_BIN_SIZE = 11
PROFILE_BLOCK_SIZE = 8
MIN_DETECTIONS = 100
FIT_MAX_ITERATIONS = 200
FIT_XTOL = 1e-6
FLAT_WIDTH_FACTOR = 100.0
FLATNESS_P_VALUE = 1e-3
PEAK_WINDOW = 31
PEAK_CENTER_TOLERANCE = 3.0
PEAK_SIGMA_BOUNDS = (0.3, 7.5)
PEAK_BOUND_TOLERANCE = 0.01
SUB_PIXEL_SIGMA = 0.6
SUPPORT_FRACTION = 0.2
CONFIDENCE_LEVEL = 0.95
UNAMBIGUITY_SIGMAS = 5.0
PHOTON_COUNTING_LIMIT = 0.5
OVERLAP_CYCLIC = "cyclic"
OVERLAP_LINEAR = "linear"
OVERLAP_MODES = (OVERLAP_CYCLIC, OVERLAP_LINEAR)

# CLI exit codes
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_STORAGE = 3
EXIT_PLANE_MISMATCH = 4
