"""Two-tower embedding model, triplet loss, mining strategies and training loop."""
from .features import FeatureRecord, char_trigrams, extract_text_features, hash_token
from .loss import TripletBatch, triplet_loss
from .mining import (MiningConfig, Session, mine_hard_positives, mine_offline_hard_negatives,
                     mine_online_hard_negatives, mine_random_negatives)
from .model import (EncoderModel, ModelConfig, encode, init_towers, load_checkpoint,
                    save_checkpoint)
from .train import TrainConfig, TrainingData, TrainingExample, examples_from_sessions, train
