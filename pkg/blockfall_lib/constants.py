# Imagery
PIXEL_SCALE = 0.25  # m/px
DIFFERENCE_OFFSET = 128
INTENSITY_MAX = 255

# Co-registration
TILE_SIZE = 200
MIN_TILE_SIDE = 32
ECC_MAX_ITER = 50
ECC_TOL = 1e-4
ECC_SEARCH_BOUND = 20.0
ECC_CORRELATION_FLOOR = 0.5
ECC_PYRAMID_LEVELS = 2
BILATERAL_DIAMETER = 5
BILATERAL_SIGMA_INTENSITY = 25.0
BILATERAL_SIGMA_SPACE = 3.0
NORMALIZE_PERCENTILES = (2.0, 98.0)

# HOG
WINDOW_WIDTH = 64
WINDOW_HEIGHT = 80
CELL_SIZE = 8
BLOCK_CELLS = 2
BLOCK_STRIDE = 8
ORIENTATION_BINS = 9
L2HYS_CLIP = 0.2
NORM_EPS = 1e-6
POSITIVE_ASPECT = 4 / 5
NEGATIVE_STRIDE = 32
MIN_ANNOTATION_WIDTH = 8
MIN_ANNOTATION_HEIGHT = 10

# SVR and detection
SVR_EPSILON = 0.1
SVR_C = 0.01
SVR_BIAS_SCALE = 10.0
SVR_TOL = 1e-3
SVR_MAX_PASSES = 1000
UPSCALE_FACTOR = 8
SCALE_FACTOR = 1.05
HIT_THRESHOLD = 0.5
DETECTION_STRIDE = 8
GROUP_IOU = 0.3
GROUP_MIN_VOTES = 2

# Blob chain
BAND_SIGMA_FRACTION = 0.5
MIN_REGION_AREA = 4
MSER_DELTA = 5
MSER_MAX_AREA_FRACTION = 0.01
MSER_MAX_VARIATION = 0.25
MSER_MIN_DIVERSITY = 0.2
BLOB_THRESHOLD_STEP = 10
BLOB_CENTROID_MERGE = 2.0
BLOB_MIN_REPEATABILITY = 2
CANNY_STRONG = 30.0
CANNY_WEAK = 15.0
CANNY_SIGMA = 1.0
SHADOW_CONE_DEG = 45.0
SHADOW_DISTANCE_FACTOR = 1.5
SHADOW_MIN_DISTANCE = 10.0
SHADOW_MIN_AREA_RATIO = 0.25
REGION_MERGE_OVERLAP = 0.5

# Evaluation
MATCH_IOU = 0.3
SIZE_SPLIT_M2 = 0.5
