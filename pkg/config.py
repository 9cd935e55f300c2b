# spectral grid
BAND_COUNT = 24
BAND_START_NM = 460.0
BAND_STEP_NM = 10.0
WAVELENGTHS_NM = [BAND_START_NM + BAND_STEP_NM * i for i in range(BAND_COUNT)]
RGB_CHANNELS = 3
VALUE_MAX = 255.0

# default camera response (gaussian R/G/B curves over the band grid)
RGB_RESPONSE_CENTERS_NM = (610.0, 540.0, 465.0)
RGB_RESPONSE_WIDTHS_NM = (40.0, 40.0, 35.0)

# density map / sparse stack
DENSITY_SIGMA_PX = 2.0
SPARSE_THRESHOLD = 0.05

# synthetic data
SYNTH_ENDMEMBERS_PER_SPECIES = 6
SYNTH_ENDMEMBERS_PER_STACK = (3, 5)
SYNTH_MIN_WIDTH_NM = 40.0
SYNTH_MAX_AMPLITUDE = 215.0
SYNTH_BASELINE = 20.0
SYNTH_FIELD_SIGMA_PX = 4.0
SYNTH_PIXELS_PER_SPOT = 48

# architecture
HIDDEN_FEATURES = 32
UPSCALE_LAYERS = 4
MERGE_KERNEL = 5

# training
LEARNING_RATE = 1e-3
BETA1 = 0.9
BETA2 = 0.999
ADAM_EPSILON = 1e-8
BATCH_SIZE = 256
STACK_BATCH_SIZE = 4
MAX_EPOCHS = 200
PLATEAU_PATIENCE = 20
FOLDS = 5

# evaluation
PSNR_MODES = ('amplitude', 'standard')
PSNR_MODE_ALIASES = {'paper': 'amplitude'}
SATURATION_THRESHOLD = 250.0

# probe rig (tip adapter geometry)
RIG_BASELINE_MM = 5.0
RIG_ANGLE_DEG = 10.0
RIG_SPOT_COUNT = 24
RIG_CONE_HALF_ANGLE_DEG = 12.0
WORKING_DISTANCE_MM = (15.0, 40.0)
SL_MIN_ANGLE_DEG = 1.0
SL_SKEW_TOLERANCE_MM = 0.05

# default endoscope camera
CAMERA_FOCAL_PX = 400.0
CAMERA_WIDTH = 320
CAMERA_HEIGHT = 240

# two-view triangulation
MIN_TRIANGULATION_ANGLE_DEG = 0.05

# synthetic scene
SCENE_DEPTH_MM = 30.0
SCENE_TILT_DEG = (12.0, -8.0)
SCENE_TEXTURE_SIGMA_PX = 1.5
SCENE_MOTION_MM = (7.0, 0.3, 0.5)
SCENE_ROTATION_DEG = -13.0
SCENE_ROTATION_AXIS = (0.0, 1.0, 0.1)
SCENE_RIDGE_START_MM = 8.5
SCENE_RIDGE_CURVATURE = 0.8

# feature tracking
MIN_MATCHES = 8
LK_WINDOW = 7
LK_LEVELS = 3
LK_ITERATIONS = 30
LK_MIN_EIGENVALUE = 1e-4
LK_EPSILON = 1e-3
DESCRIPTOR_PATCH = 9
CORNER_MIN_DISTANCE = 6
CORNER_THRESHOLD_REL = 0.01
SMOOTHNESS_NEIGHBORS = 8
MAX_FRAME_GAP = 1

# correspondence filter thresholds
MAX_DESCRIPTOR_DISTANCE = 0.5
MAX_FLOW_PX = 40.0
MAX_SYMMETRIC_PX = 1.0
MAX_SMOOTHNESS_PX = 3.0

# ransac / essential matrix
RANSAC_ITERATIONS = 2000
RANSAC_SAMPLE_SIZE = 8
RANSAC_THRESHOLD_PX = 1.0
RANSAC_REFINE_STEPS = 5
RANSAC_CONFIDENCE = 0.9999
RANSAC_MIN_INLIERS = 8

# scale registration
GATING_RADIUS_MM = 2.0
PLANE_NEIGHBORS = 4
REGISTRATION_ITERATIONS = 50

# overlay
NBI_WAVELENGTHS_NM = (415.0, 540.0)
FLAT_FIELD = 255.0
OVERLAY_COLORMAP = 'viridis'

# exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
