"""
Config-driven experiment pipeline.

Stages run in the order synth, pretrain, adapt, generate, eval; ood, shots and
params branch off. Each stage writes into `<output_dir>/<stage>/` and finishes
with a manifest holding its config hash. A stage whose manifest matches the
current hash is skipped unless forced; a stage whose upstream manifest does not
match fails.
"""
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import yaml
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import ConfigError, CorpusError, MissingArtifactError, TrainingError
from app.models.parameters import Parameters, ParameterCounts
from app.models.vocab import Vocab
from app.schemas.adapter import AdapterKind
from app.schemas.corpus import OOD_PRESETS, Domain, Report, Split
from app.schemas.experiment import ExperimentPlan, Method
from app.schemas.metrics import METRIC_NAMES, ScoreReport
from app.schemas.model import DecodeConfig, PUBLISHED_TOTALS, T5_BASE_SHAPED, T5_LARGE_SHAPED
from app.schemas.prompt import PromptMode, PromptSpec
from app.schemas.training import RunHistory
from app.services import adapters, checkpoint, corpus, metrics, prompting, synth, tokenizer, training, transformer
from app.services.manifest import (
    config_hash,
    file_hash,
    is_current,
    read_manifest,
    require_hash,
    write_json,
    write_manifest,
)

logger = logging.getLogger(__name__)

STAGES = ("synth", "pretrain", "adapt", "generate", "eval", "ood", "shots", "params")
UPSTREAM = {
    "pretrain": "synth",
    "adapt": "pretrain",
    "generate": "adapt",
    "eval": "generate",
    "ood": "pretrain",
    "shots": "pretrain",
}
TASK_FILE = "task.jsonl"
HYPOTHESES_FILE = "hypotheses.jsonl"


def load_plan(path: Optional[Path] = None, seed: Optional[int] = None, out: Optional[Path] = None) -> ExperimentPlan:
    """
    Read the YAML experiment file (all sections optional) and apply flag overrides.
    """
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path} is not valid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path} must contain a mapping of sections")
    data.setdefault("seed", settings.DEFAULT_SEED)
    data.setdefault("output_dir", settings.OUTPUT_DIR)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["output_dir"] = str(out)
    try:
        return ExperimentPlan(**data)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid experiment config: {problems}") from e


def stage_hashes(plan: ExperimentPlan) -> Dict[str, str]:
    """
    Config hash of every stage; each includes the hash of its upstream stage.
    """
    h: Dict[str, str] = {}
    h["synth"] = config_hash({"corpus": plan.corpus, "seed": plan.seed})
    h["pretrain"] = config_hash(
        {"tokenizer": plan.tokenizer, "model": plan.model, "pretrain": plan.pretrain, "upstream": h["synth"]}
    )
    h["adapt"] = config_hash(
        {"adapt": plan.adapt, "methods": [k.value for k in plan.adapter_methods()], "upstream": h["pretrain"]}
    )
    h["generate"] = config_hash(
        {"generate": plan.generate, "prompting": plan.prompting, "methods": plan.methods, "upstream": h["adapt"]}
    )
    h["eval"] = config_hash({"eval": plan.eval, "upstream": h["generate"]})
    h["ood"] = config_hash(
        {"ood": plan.ood, "adapt": plan.adapt, "generate": plan.generate, "eval": plan.eval, "upstream": h["pretrain"]}
    )
    h["shots"] = config_hash(
        {
            "shots": plan.shots,
            "prompting": plan.prompting,
            "generate": plan.generate,
            "eval": plan.eval,
            "upstream": h["pretrain"],
        }
    )
    h["params"] = config_hash({"params": plan.params, "model": plan.model, "lora": plan.adapt.lora, "prefix": plan.adapt.prefix})
    return h


# ---------------------------------------------------------------------------
# Report writers
# ---------------------------------------------------------------------------

def markdown_table(headers: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    def cell(value: object) -> str:
        if isinstance(value, float):
            return f"{value:.2f}"
        return str(value)

    lines = ["| " + " | ".join(headers) + " |", "|" + "|".join("---" for _ in headers) + "|"]
    lines += ["| " + " | ".join(cell(v) for v in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def write_table(directory: Path, name: str, title: str, frame: pd.DataFrame, stamp: Dict[str, object]) -> None:
    """
    `<name>.csv` and `<name>.md` with the config hash and seed embedded.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stamped = frame.copy()
    for key, value in stamp.items():
        stamped[key] = value
    stamped.to_csv(directory / f"{name}.csv", index=False, float_format="%.4f")
    header = f"# {title}\n\nconfig hash `{stamp['config_hash']}`, seed {stamp['seed']}\n\n"
    body = markdown_table(list(frame.columns), frame.itertuples(index=False, name=None))
    (directory / f"{name}.md").write_text(header + body, encoding="utf-8")


def read_table(directory: Path, name: str, stage: str) -> pd.DataFrame:
    # method labels such as "null" stay strings; only empty cells are missing
    path = Path(directory) / f"{name}.csv"
    if not path.exists():
        raise MissingArtifactError(stage, str(path))
    return pd.read_csv(path, keep_default_na=False, na_values=[""])


def write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for row in rows:
            handle.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path: Path, stage: str) -> List[dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(stage, str(path))
    with open(path, encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]


# ---------------------------------------------------------------------------
# Shared building blocks (also used inside worker processes)
# ---------------------------------------------------------------------------

def encode_reports(reports: Sequence[Report], vocab: Vocab, plan: ExperimentPlan) -> List[training.Example]:
    """Null-prompt sources and impression targets for adaptation."""
    spec = PromptSpec(mode=PromptMode.NULL)
    model = plan.model
    return [
        training.encode_example(
            prompting.build_prompt(r.findings, spec, vocab, model.max_source_len),
            r.impression,
            vocab,
            model.max_source_len,
            model.max_target_len,
        )
        for r in reports
    ]


def adapt_params(
    base: Parameters,
    kind: AdapterKind,
    train_reports: Sequence[Report],
    val_reports: Sequence[Report],
    vocab: Vocab,
    plan: ExperimentPlan,
) -> Tuple[Parameters, RunHistory]:
    params = base.copy()
    params.freeze_all()
    adapters.attach(plan.model, kind, params, lora=plan.adapt.lora, prefix=plan.adapt.prefix)
    config = plan.adapt.regime(kind).model_copy(update={"seed": plan.seed})
    params, history = training.fine_tune(
        params, kind, encode_reports(train_reports, vocab, plan), encode_reports(val_reports, vocab, plan), config
    )
    for name in base.tensors:
        if not params.trainable.get(name, False) and params.tensors[name].tobytes() != base.tensors[name].tobytes():
            raise TrainingError(f"frozen tensor '{name}' changed during {kind.value} tuning")
    return params, history


def _retrieval_embedder(params: Parameters, vocab: Vocab, plan: ExperimentPlan):
    if plan.prompting.embedder == "bow":
        return prompting.BagOfWordsEmbedder()
    return prompting.EncoderEmbedder(params, vocab)


def generate_impressions(
    params: Parameters,
    vocab: Vocab,
    reports: Sequence[Report],
    spec: PromptSpec,
    train_reports: Sequence[Report],
    plan: ExperimentPlan,
    retrieval_params: Optional[Parameters] = None,
) -> List[str]:
    """
    Greedy impressions for `reports` under prompt `spec`; few-shot neighbours
    come from `train_reports`.
    """
    max_len = plan.model.max_source_len
    neighbors: List[List[Report]] = [[] for _ in reports]
    if spec.mode == PromptMode.FEW_SHOT:
        embedder = _retrieval_embedder(retrieval_params or params, vocab, plan)
        index = prompting.build_index(train_reports, embedder)
        by_id = {r.id: r for r in train_reports}
        queries = embedder([r.findings for r in reports])
        neighbors = [
            [by_id[i] for i in prompting.knn_retrieve(queries[j], index, spec.k, exclude_id=r.id)]
            for j, r in enumerate(reports)
        ]
    prompts = [
        prompting.build_prompt(r.findings, spec, vocab, max_len, neighbors[j]) for j, r in enumerate(reports)
    ]
    decode = DecodeConfig(max_target_len=plan.generate.max_target_len, eos_id=vocab.eos_id)
    size = plan.generate.batch_size
    hypotheses: List[str] = []
    for start in range(0, len(prompts), size):
        ids = [tokenizer.encode(p, vocab, add_eos=True) for p in prompts[start : start + size]]
        for output in transformer.generate(params, transformer.pad_batch(ids), decode):
            hypotheses.append(tokenizer.decode(output, vocab))
    return hypotheses


def evaluate_rows(rows: Sequence[dict], embedder, lexicon: metrics.Lexicon) -> ScoreReport:
    return metrics.corpus_evaluate(
        [r["id"] for r in rows],
        [r["reference"] for r in rows],
        [r["hypothesis"] for r in rows],
        [(r["modality"], r["anatomy"]) for r in rows],
        embedder,
        lexicon,
    )


def hypothesis_rows(reports: Sequence[Report], hypotheses: Sequence[str]) -> List[dict]:
    return [
        {
            "id": r.id,
            "modality": r.modality.value,
            "anatomy": r.anatomy.value,
            "reference": r.impression,
            "hypothesis": h,
        }
        for r, h in zip(reports, hypotheses)
    ]


def run_cells(fn: Callable, cells: Sequence[tuple]) -> List:
    """
    Run independent grid cells, in worker processes when WORKERS > 1.
    Results come back in cell order.
    """
    if settings.WORKERS > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=settings.WORKERS) as pool:
            return list(pool.map(fn, *zip(*cells)))
    return [fn(*cell) for cell in cells]


def _adapt_cell(plan: ExperimentPlan, base_name: str, kind: AdapterKind) -> Dict[str, object]:
    experiment = Experiment(plan)
    vocab = experiment.vocab()
    reports = experiment.task_reports()
    base = experiment.base(base_name)
    params, history = adapt_params(
        base, kind, corpus.by_split(reports, Split.TRAIN), corpus.by_split(reports, Split.VAL), vocab, plan
    )
    cell = experiment.stage_dir("adapt") / base_name / kind.value
    if kind == AdapterKind.FULL:
        checkpoint.save_checkpoint(params, cell / "model.npz", tokenizer.vocab_reference(vocab))
    else:
        checkpoint.save_adapter(params, cell / "adapter.npz")
    training.history_to_csv(history, cell)
    counts = params.counts()
    summary = {
        "base": base_name,
        "method": kind.value,
        "config_hash": experiment.hashes["adapt"],
        "seed": plan.seed,
        "train_config": plan.adapt.regime(kind).model_copy(update={"seed": plan.seed}),
        "corpus_hash": file_hash(experiment.stage_dir("synth") / TASK_FILE),
        "trainable": counts.trainable,
        "total": counts.total,
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "epochs": history.epochs_completed,
    }
    write_json(cell / "run.json", summary)
    return {k: v for k, v in summary.items() if k != "train_config"}


def _ood_cell(plan: ExperimentPlan, preset_name: str) -> Dict[str, object]:
    experiment = Experiment(plan)
    vocab = experiment.vocab()
    reports = experiment.task_reports()
    selector = next(p for p in OOD_PRESETS if p.name == preset_name)
    partition = corpus.ood_partition(reports, selector)
    val = [r for r in corpus.by_split(reports, Split.VAL) if selector.matches_train(r)]
    base = experiment.base(plan.ood.base.value)
    params, _ = adapt_params(base, plan.ood.method, partition.train, val, vocab, plan)
    test = experiment.cap(partition.test)
    hypotheses = generate_impressions(params, vocab, test, PromptSpec(), partition.train, plan)
    report = evaluate_rows(hypothesis_rows(test, hypotheses), *experiment.scorers(vocab, reports))
    return {
        "setting": preset_name,
        "n_train": len(partition.train),
        "n_test": len(test),
        **{m: report.corpus_means[m] for m in METRIC_NAMES},
    }


def _shots_cell(plan: ExperimentPlan, base_name: str, k: int) -> Dict[str, object]:
    experiment = Experiment(plan)
    vocab = experiment.vocab()
    reports = experiment.task_reports()
    params = experiment.base(base_name)
    spec = PromptSpec() if k == 0 else PromptSpec(mode=PromptMode.FEW_SHOT, k=k)
    test = experiment.cap(corpus.by_split(reports, Split.TEST))
    train = corpus.by_split(reports, Split.TRAIN)
    hypotheses = generate_impressions(params, vocab, test, spec, train, plan)
    report = evaluate_rows(hypothesis_rows(test, hypotheses), *experiment.scorers(vocab, reports))
    return {"base": base_name, "k": k, **{m: report.corpus_means[m] for m in METRIC_NAMES}}


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

class Experiment:
    """
    One experiment plan bound to its output directory.
    """

    def __init__(self, plan: ExperimentPlan, force: bool = False):
        self.plan = plan
        self.force = force
        self.root = Path(plan.output_dir)
        self.hashes = stage_hashes(plan)

    # -- paths and artifacts -------------------------------------------------

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def stamp(self, stage: str) -> Dict[str, object]:
        return {"config_hash": self.hashes[stage], "seed": self.plan.seed}

    def task_reports(self) -> List[Report]:
        path = self.stage_dir("synth") / TASK_FILE
        if not path.exists():
            raise MissingArtifactError("synth", str(path))
        return corpus.load_corpus(path)

    def vocab(self) -> Vocab:
        directory = self.stage_dir("pretrain")
        if not (directory / tokenizer.VOCAB_FILE).exists():
            raise MissingArtifactError("pretrain", str(directory / tokenizer.VOCAB_FILE))
        return tokenizer.load_vocab(directory)

    def base(self, name: str) -> Parameters:
        return checkpoint.load_checkpoint(self.stage_dir("pretrain") / f"base_{name}.npz", stage="pretrain")

    def base_names(self) -> List[str]:
        return [d.value for d in self.plan.pretrain.domains]

    def cap(self, reports: Sequence[Report]) -> List[Report]:
        limit = self.plan.generate.max_test
        return list(reports if limit is None else reports[:limit])

    def system(self, base_name: str, name: str, method: Method) -> Parameters:
        """Parameters of one (base, method) system, adapters loaded onto the base."""
        base = self.base(base_name)
        if not isinstance(method, AdapterKind):
            return base
        cell = self.stage_dir("adapt") / base_name / method.value
        if method == AdapterKind.FULL:
            return checkpoint.load_checkpoint(cell / "model.npz", stage="adapt")
        params = checkpoint.load_adapter(cell / "adapter.npz", base, stage="adapt")
        if method == AdapterKind.LORA:
            adapters.merge_lora(params)
        return params

    def scorers(self, vocab: Vocab, reports: Sequence[Report]):
        """
        Token embedder and lexicon shared by every evaluated system.

        Similarity uses the token embeddings of the clinical base (or the first
        base) so scores of different systems are comparable.
        """
        names = self.base_names()
        reference = Domain.CLINICAL.value if Domain.CLINICAL.value in names else names[0]
        embedder = metrics.ModelTokenEmbedder(self.base(reference), vocab)
        if self.plan.eval.lexicon_path:
            lexicon = metrics.load_lexicon(Path(self.plan.eval.lexicon_path))
        else:
            lexicon = metrics.build_lexicon(
                [r.impression for r in corpus.by_split(reports, Split.TRAIN)], top_n=self.plan.eval.lexicon_top_n
            )
        return embedder, lexicon

    # -- stage bookkeeping -------------------------------------------------

    def _skip(self, stage: str) -> bool:
        if not self.force and is_current(self.stage_dir(stage), self.hashes[stage]):
            logger.info(f"Stage {stage} is up to date; skipping (use --force to re-run)", extra={"stage": stage})
            return True
        return False

    def _require_upstream(self, stage: str) -> Dict[str, object]:
        upstream = UPSTREAM[stage]
        manifest = read_manifest(self.stage_dir(upstream), upstream)
        require_hash(manifest, self.hashes[upstream], upstream)
        return manifest

    def _finish(self, stage: str, **fields) -> Dict[str, object]:
        upstream = UPSTREAM.get(stage)
        if upstream:
            fields["upstream"] = {upstream: self.hashes[upstream]}
        manifest = write_manifest(self.stage_dir(stage), stage, self.hashes[stage], self.plan.seed, **fields)
        logger.info(f"Stage {stage} finished", extra={"stage": stage, "run": self.hashes[stage]})
        return manifest

    # -- stages ------------------------------------------------------------

    def synth(self) -> None:
        if self._skip("synth"):
            return
        plan = self.plan
        directory = self.stage_dir("synth")
        grammar = plan.corpus.grammar
        if plan.corpus.path:
            reports = corpus.load_corpus(Path(plan.corpus.path))
        else:
            reports = synth.synth_corpus(grammar, Domain.CLINICAL, plan.corpus.n_task, plan.seed)
        if any(r.split is None for r in reports):
            reports = corpus.split(reports, plan.seed, plan.corpus.ratios)
        corpus.save_corpus(reports, directory / TASK_FILE)

        pretraining = {}
        for offset, domain in enumerate(plan.pretrain.domains, start=1):
            pretrain_grammar = grammar.model_copy(update={"id_prefix": f"p{offset}"})
            texts = synth.synth_corpus(pretrain_grammar, domain, plan.corpus.n_pretrain, plan.seed + offset)
            path = directory / f"pretrain_{domain.value}.jsonl"
            corpus.save_corpus(texts, path)
            pretraining[domain.value] = {
                **synth.corpus_manifest(texts, pretrain_grammar, domain, plan.seed + offset),
                "file_hash": file_hash(path),
            }
        split_counts = {s.value: len(corpus.by_split(reports, s)) for s in Split}
        self._finish(
            "synth",
            task={
                "source": plan.corpus.path or "grammar",
                "grammar_version": grammar.version,
                "n_reports": len(reports),
                "split_counts": split_counts,
                "stratum_counts": corpus.stratum_counts(reports),
                "file_hash": file_hash(directory / TASK_FILE),
            },
            pretraining=pretraining,
        )

    def pretrain(self) -> None:
        if self._skip("pretrain"):
            return
        self._require_upstream("pretrain")
        plan = self.plan
        directory = self.stage_dir("pretrain")
        reports = self.task_reports()
        texts = {
            d.value: [
                f"{r.findings} {r.impression}"
                for r in corpus.load_corpus(self.stage_dir("synth") / f"pretrain_{d.value}.jsonl")
            ]
            for d in plan.pretrain.domains
        }
        vocab_corpus = [t for domain_texts in texts.values() for t in domain_texts]
        vocab_corpus += [f"{r.findings} {r.impression}" for r in corpus.by_split(reports, Split.TRAIN)]
        vocab = tokenizer.build_vocab(vocab_corpus, plan.tokenizer.vocab_size, plan.tokenizer.n_sentinels)
        tokenizer.save_vocab(vocab, directory)

        config = plan.pretrain.train.model_copy(update={"seed": plan.seed})
        bases = {}
        for name, domain_texts in texts.items():
            params = transformer.init_params(plan.model, seed=plan.seed)
            params, history = training.pretrain(params, domain_texts, vocab, config, plan.pretrain.span)
            params.metadata["domain"] = name
            path = directory / f"base_{name}.npz"
            checkpoint.save_checkpoint(params, path, tokenizer.vocab_reference(vocab))
            training.history_to_csv(history, directory / name)
            bases[name] = {"final_train_loss": history.train_loss[-1], "epochs": history.epochs_completed}
        self._finish(
            "pretrain",
            vocab=tokenizer.vocab_reference(vocab),
            bases=bases,
            corpus_hash=file_hash(self.stage_dir("synth") / TASK_FILE),
        )

    def adapt(self) -> None:
        if self._skip("adapt"):
            return
        self._require_upstream("adapt")
        cells = [(self.plan, b, k) for b in self.base_names() for k in self.plan.adapter_methods()]
        results = run_cells(_adapt_cell, cells)
        self._finish("adapt", cells=results)

    def generate(self) -> None:
        if self._skip("generate"):
            return
        self._require_upstream("generate")
        plan = self.plan
        vocab = self.vocab()
        reports = self.task_reports()
        train = corpus.by_split(reports, Split.TRAIN)
        test = self.cap(corpus.by_split(reports, Split.TEST))
        if not test:
            raise CorpusError("the task corpus has no test reports")
        systems = []
        for base_name in self.base_names():
            base = self.base(base_name)
            for name, method in plan.parsed_methods():
                params = self.system(base_name, name, method)
                spec = method if isinstance(method, PromptSpec) else PromptSpec()
                hypotheses = generate_impressions(params, vocab, test, spec, train, plan, retrieval_params=base)
                write_jsonl(
                    self.stage_dir("generate") / base_name / name / HYPOTHESES_FILE, hypothesis_rows(test, hypotheses)
                )
                systems.append({"base": base_name, "method": name, "n": len(test)})
                logger.info(f"Generated {len(test)} impressions for {base_name}/{name}", extra={"stage": "generate"})
        self._finish("generate", systems=systems)

    def eval(self) -> None:
        if self._skip("eval"):
            return
        self._require_upstream("eval")
        directory = self.stage_dir("eval")
        vocab = self.vocab()
        embedder, lexicon = self.scorers(vocab, self.task_reports())
        summary_rows = []
        strata_rows = []
        for base_name in self.base_names():
            for name in self.plan.methods:
                rows = read_jsonl(self.stage_dir("generate") / base_name / name / HYPOTHESES_FILE, "generate")
                report = evaluate_rows(rows, embedder, lexicon)
                stamp = {**self.stamp("eval"), "base": base_name, "method": name}
                metrics.write_score_report(report, directory / base_name / name, stamp)
                summary_rows.append({"base": base_name, "method": name, **report.corpus_means})
                for stratum, scores in report.stratified.items():
                    strata_rows.append(
                        {"base": base_name, "method": name, "stratum": stratum, "count": scores.count, **scores.means}
                    )
        write_table(directory, "summary", "Metric means per base and method", pd.DataFrame(summary_rows), self.stamp("eval"))
        write_table(directory, "strata", "Metric means per stratum", pd.DataFrame(strata_rows), self.stamp("eval"))
        self._finish("eval", systems=len(summary_rows))

    def ood(self) -> None:
        if self._skip("ood"):
            return
        self._require_upstream("ood")
        rows = run_cells(_ood_cell, [(self.plan, name) for name in self.plan.ood.presets])
        title = f"Out-of-distribution ({self.plan.ood.method.value} on the {self.plan.ood.base.value} base)"
        write_table(self.stage_dir("ood"), "ood", title, pd.DataFrame(rows), self.stamp("ood"))
        self._finish("ood", rows=len(rows))

    def shots(self) -> None:
        if self._skip("shots"):
            return
        self._require_upstream("shots")
        cells = [(self.plan, b.value, k) for b in self.plan.shots.bases for k in self.plan.shots.ks]
        rows = run_cells(_shots_cell, cells)
        write_table(self.stage_dir("shots"), "shots", "In-context examples", pd.DataFrame(rows), self.stamp("shots"))
        self._finish("shots", rows=len(rows))

    def params(self) -> None:
        if self._skip("params"):
            return
        rows = parameter_rows(self.plan)
        write_table(self.stage_dir("params"), "params", "Tunable parameters", pd.DataFrame(rows), self.stamp("params"))
        self._finish("params", rows=len(rows))

    def run(self, stages: Sequence[str] = STAGES) -> None:
        for stage in stages:
            getattr(self, stage)()


def parameter_rows(plan: ExperimentPlan) -> List[Dict[str, object]]:
    """
    Tunable count and share of the total per architecture shape and method.

    The base and large shapes use the published model totals as denominator.
    """
    shapes = {"desk": plan.model, "base": T5_BASE_SHAPED, "large": T5_LARGE_SHAPED}
    rows = []
    for shape in plan.params.shapes:
        config = shapes[shape]
        architecture_total = transformer.base_parameter_count(config)
        total = PUBLISHED_TOTALS.get(shape, architecture_total)
        for kind in (AdapterKind.PREFIX, AdapterKind.LORA, AdapterKind.FULL):
            if kind == AdapterKind.FULL:
                tunable = total
            else:
                adapter = plan.adapt.lora if kind == AdapterKind.LORA else plan.adapt.prefix
                tunable = adapters.adapter_parameter_count(config, adapter)
            rows.append(
                {
                    "shape": shape,
                    "method": kind.value,
                    "tunable": tunable,
                    "total": total,
                    "architecture_total": architecture_total,
                    "percent": adapters.tunable_fraction(ParameterCounts(total=total, trainable=tunable)),
                }
            )
    return rows
