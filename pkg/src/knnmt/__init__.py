"""Desk-scale neural machine translation with kNN datastores: retrieval-
interpolated decoding and retrieval-scaled fine-tuning."""

from knnmt._kernels import BACKEND as KERNEL_BACKEND
from knnmt.bleu import BleuReport, corpus_bleu
from knnmt.datastore import Datastore, Retrieved, build_datastore, load_datastore, save_datastore, search_exact
from knnmt.decoding import KnnSource, translate, translate_corpus
from knnmt.index import ClusteredIndex, build_clustered_index, load_index, save_index, search_clustered
from knnmt.knn import KnnParams, interpolate, knn_distribution, max_knn_prob
from knnmt.model import ModelShape, StepOutput, TranslationModel, load_checkpoint, save_checkpoint
from knnmt.tokenizer import BpeVocab, ParallelCorpus, encode_pairs, filter_by_length
from knnmt.trainer import ScalingCoefficient, TrainConfig, fine_tune

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND", "BleuReport", "corpus_bleu", "Datastore", "Retrieved",
    "build_datastore", "load_datastore", "save_datastore", "search_exact",
    "KnnSource", "translate", "translate_corpus", "ClusteredIndex",
    "build_clustered_index", "load_index", "save_index", "search_clustered",
    "KnnParams", "interpolate", "knn_distribution", "max_knn_prob", "ModelShape",
    "StepOutput", "TranslationModel", "load_checkpoint", "save_checkpoint",
    "BpeVocab", "ParallelCorpus", "encode_pairs", "filter_by_length",
    "ScalingCoefficient", "TrainConfig", "fine_tune",
]
