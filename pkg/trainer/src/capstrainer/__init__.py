from .genotype import GenotypeError, Layer, ParsedGenotype, parse_genotype
from .model import BuildError, BuiltNetwork, CapsuleNetwork, build, margin_loss, squash
from .serve import TrainerConfig, serve, stub_evaluate, torch_evaluate

__version__ = "0.1.0"
