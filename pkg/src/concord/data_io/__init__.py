from .checkpoint import (
    FORMAT_VERSION,
    canonical_json,
    decode_model,
    encode_model,
    load_checkpoint,
    load_model,
    load_report,
    save_model,
    save_report,
)
from .cohort_io import (
    BAGS_FILE,
    CELLS_FILE,
    COHORT_FILES,
    FEATURES_FILE,
    RECORDS_FILE,
    read_bags,
    read_cohort,
    write_bags,
    write_cohort,
)
from .export import attention_svg, km_svg, write_km_csv, write_km_svg, write_table
from .synthetic import CELL_TYPES, CohortBundle, SyntheticSpec, generate_synthetic
