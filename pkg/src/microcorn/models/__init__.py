from .lm import ToyLM, ToyLMConfig, extract_hidden_state, extract_hidden_states, lm_forward, pretrain_toy_lm
from .tokenizer import Tokenizer, default_tokenizer
from .visual import TileAdapter, split_tiles

__all__ = [
    "ToyLM", "ToyLMConfig", "extract_hidden_state", "extract_hidden_states", "lm_forward",
    "pretrain_toy_lm", "Tokenizer", "default_tokenizer", "TileAdapter", "split_tiles",
]
