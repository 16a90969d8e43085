# https://en.wikipedia.org/wiki/Whitespace_character#Unicode
WHITESPACES = (
    '\t'  # 9
    '\n'  # 10
    '\x0b'  # 11
    '\x0c'  # 12
    '\r'  # 13
    ' '  # 32
    '\x85'  # 133
    '\xa0'  # 160
    '\u2000'  # 8192
    '\u200b'  # 8203
    '\u3000'  # 12288
    '\ufeff'  # 65279
)
COLUMN_NAME_PATTERN = '^[a-z][a-z0-9_]*$'
CONFIG_KEY_PATTERN = '^[a-z][a-z0-9_]*$'

# spatial hash primes, one per axis
HASH_PRIMES = (1, 2654435761, 805459861)

TUM_DEPTH_SCALE = 5000.0
REPLICA_DEPTH_SCALE = 6553.5
TUM_MAX_TIME_DIFFERENCE = 0.02

# fr1 intrinsics published with the TUM RGB-D benchmark
TUM_INTRINSICS = {'fx': 517.3, 'fy': 516.5, 'cx': 318.6, 'cy': 255.3, 'width': 640, 'height': 480}
REPLICA_INTRINSICS = {'fx': 600.0, 'fy': 600.0, 'cx': 599.5, 'cy': 339.5, 'width': 1200, 'height': 680}

DATASET_TAGS = ('generic', 'replica', 'scannet', 'tum', 'synthetic')

EXIT_OK = 0
EXIT_VALIDATION_ERROR = 1
EXIT_RUNTIME_FAILURE = 2

CHECKPOINT_VERSION = 1
UNCERTAINTY_IMAGE_SCALE = 255
