from . pipeline import train_pipeline, run_all, ablate
from m3dm_lite.dtb import get_scores
