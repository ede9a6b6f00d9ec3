import os


class Config:
    """Centralized configuration for the SpikeForge toolkit"""

    # Runtime
    LOG_LEVEL = os.getenv("SPIKEFORGE_LOG_LEVEL", "INFO")
    THREADS = int(
        os.getenv("SPIKEFORGE_THREADS", 4)
    )
    SEED = int(
        os.getenv("SPIKEFORGE_SEED", 0)
    )
    OUT_DIR = os.getenv("SPIKEFORGE_OUT_DIR", "runs")
    DATA_DIR = os.getenv("SPIKEFORGE_DATA_DIR", "data")
    ENVIRONMENT = os.getenv("SPIKEFORGE_ENVIRONMENT", "development")
    SENTRY_DSN = os.getenv("SPIKEFORGE_SENTRY_DSN", "")

    # Event data
    SENSOR_WIDTH = int(
        os.getenv("SPIKEFORGE_SENSOR_WIDTH", 128)
    )
    SENSOR_HEIGHT = int(
        os.getenv("SPIKEFORGE_SENSOR_HEIGHT", 128)
    )
    NCALTECH_RESOLUTION = int(
        os.getenv("SPIKEFORGE_NCALTECH_RESOLUTION", 240)
    )
    WINDOW_US = int(
        os.getenv("SPIKEFORGE_WINDOW_US", 10000)  # 10 ms bins
    )
    TRAIN_FRACTION = float(
        os.getenv("SPIKEFORGE_TRAIN_FRACTION", 0.8)
    )

    # Neuron model
    SURROGATE_STEEPNESS = float(
        os.getenv("SPIKEFORGE_SURROGATE_STEEPNESS", 10.0)  # beta = steepness / theta
    )
    MAX_SPIKES_PER_STEP = int(
        os.getenv("SPIKEFORGE_MAX_SPIKES_PER_STEP", 2 ** 15 - 1)
    )
    DETACH_RESET = (
        os.getenv("SPIKEFORGE_DETACH_RESET", "true").lower() == "true"
    )
    DEFAULT_THETA = float(
        os.getenv("SPIKEFORGE_DEFAULT_THETA", 1.0)
    )
    LN_EPS = float(
        os.getenv("SPIKEFORGE_LN_EPS", 1e-5)
    )
    BN_MOMENTUM = float(
        os.getenv("SPIKEFORGE_BN_MOMENTUM", 0.1)
    )

    # Detection head
    GRID_S = int(
        os.getenv("SPIKEFORGE_GRID_S", 4)
    )
    GRID_B = int(
        os.getenv("SPIKEFORGE_GRID_B", 2)
    )
    LAMBDA_COORD = float(
        os.getenv("SPIKEFORGE_LAMBDA_COORD", 5.0)
    )
    LAMBDA_NOOBJ = float(
        os.getenv("SPIKEFORGE_LAMBDA_NOOBJ", 0.5)
    )
    IOU_THRESHOLD = float(
        os.getenv("SPIKEFORGE_IOU_THRESHOLD", 0.5)
    )

    # Training
    EPOCHS = int(
        os.getenv("SPIKEFORGE_EPOCHS", 100)
    )
    BATCH_SIZE = int(
        os.getenv("SPIKEFORGE_BATCH_SIZE", 16)
    )
    LEARNING_RATE = float(
        os.getenv("SPIKEFORGE_LEARNING_RATE", 1e-3)
    )
    ADAM_BETA1 = float(
        os.getenv("SPIKEFORGE_ADAM_BETA1", 0.9)
    )
    ADAM_BETA2 = float(
        os.getenv("SPIKEFORGE_ADAM_BETA2", 0.999)
    )
    ADAM_EPS = float(
        os.getenv("SPIKEFORGE_ADAM_EPS", 1e-8)
    )
    REG_LAMBDA = float(
        os.getenv("SPIKEFORGE_REG_LAMBDA", 0.0)
    )

    # Chip budgets (estimates, the datasheet figures are not public)
    CORE_COUNT = int(
        os.getenv("SPIKEFORGE_CORE_COUNT", 9)
    )
    MAX_KERNEL_ENTRIES = int(
        os.getenv("SPIKEFORGE_MAX_KERNEL_ENTRIES", 2 ** 20)
    )
    MAX_NEURON_ENTRIES = int(
        os.getenv("SPIKEFORGE_MAX_NEURON_ENTRIES", 2 ** 16)
    )
    MAX_SYNOPS_PER_S = float(
        os.getenv("SPIKEFORGE_MAX_SYNOPS_PER_S", 5e7)
    )
    MAX_INPUT_RESOLUTION = int(
        os.getenv("SPIKEFORGE_MAX_INPUT_RESOLUTION", 128)
    )
    QUEUE_CAPACITY = int(
        os.getenv("SPIKEFORGE_QUEUE_CAPACITY", 2 ** 16)
    )
    STALL_DELAY_US = float(
        os.getenv("SPIKEFORGE_STALL_DELAY_US", 500)
    )

    # Power model (slope from the published spikes/s vs mW fit)
    IDLE_MW = float(
        os.getenv("SPIKEFORGE_IDLE_MW", 0.9)
    )
    POWER_SLOPE_MW = float(
        os.getenv("SPIKEFORGE_POWER_SLOPE_MW", 5.713e-5)  # mW per spike/s
    )
    POWER_SAMPLE_HZ = float(
        os.getenv("SPIKEFORGE_POWER_SAMPLE_HZ", 100)
    )

    # Error Messages
    ERROR_MISSING_ARTIFACT = os.getenv(
        "SPIKEFORGE_ERROR_MISSING_ARTIFACT",
        "Required artifact not found: {path}"
    )
    ERROR_CONSTRAINTS = os.getenv(
        "SPIKEFORGE_ERROR_CONSTRAINTS",
        "Network does not fit the chip: {violations}"
    )


# Create a single instance
config = Config()
