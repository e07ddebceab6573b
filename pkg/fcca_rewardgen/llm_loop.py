""" The reward design loop

Initialization asks the reward designer for a program, trains a fresh team
with it in the simple environment and evaluates it, feeding the evaluation
metrics back until the success rate clears a threshold. Tuning then keeps
the trained team, and for each iteration trains it with the current program
in the complex environment until the loss converges, evaluates it, and asks
for a revised program given the metrics and a summary of the training run.

Feedback carries task-level metrics only, never reward magnitudes. Every
iteration is appended to a line-delimited journal holding the prompt, the
raw replies, the extracted program, the training summary and the report,
which is enough to re-run the loop offline and check it reproduces.
"""

import os
import re
import tempfile
import typing
from dataclasses import dataclass, field

import fcca_rewardgen.logging as logging
import fcca_rewardgen.world as world
from fcca_rewardgen.exception import ConfigurationError, InputError, RewardGenError
from fcca_rewardgen.evaluation import EvalConfig, EvalReport, run_evaluation
from fcca_rewardgen.files import dump_record, read_records, RecordWriter
from fcca_rewardgen.ppo import (AgentTeam, PpoConfig, RewardEvaluationError, TrainingSummary,
                                train_until_converged)
from fcca_rewardgen.rewarddsl import (DslError, RewardProgram, RewardSource, SCHEMA_VERSION,
                                      compile_reward, pretty_print, schema_text)

class CandidateFailure(RewardGenError):
    """ No valid reward program within the retry limit """

    def __init__(self, attempts):
        super().__init__(f'no valid reward program after {len(attempts)} attempt(s)')
        self.attempts = attempts

class InitializationError(RewardGenError):

    def __init__(self, records, eta):
        super().__init__(f'no reward program reached a success rate of {eta} '
                         f'in {len(records)} initialization iteration(s)')
        self.records = records

class JournalError(RewardGenError):
    pass

class ReplayDivergence(RewardGenError):

    def __init__(self, index, expected, actual):
        self.index = index
        self.expected = expected
        self.actual = actual
        label = expected.get('kind', '?')
        if label == 'iteration':
            label = f'{expected.get("phase")} iteration {expected.get("k")}'
        fields = sorted(k for k in set(expected) | set(actual) if expected.get(k) != actual.get(k))
        super().__init__(f'replay diverges at journal record {index} ({label}), differing fields: {fields}')

JOURNAL_FORMAT = 'fcca-journal/1'

# ---------------------------------------------------------------------------
# Prompts

@dataclass(frozen=True)
class Task:
    name: str
    priority: str   # hard | soft
    text: str

DEFAULT_TASKS = (
    Task('avoid-obstacles', 'hard', 'Avoid the dynamic obstacles in the environment.'),
    Task('formation', 'hard', 'Maintain the specified formation shape.'),
    Task('destination', 'hard', 'Reach the destination.'),
    Task('stable-velocity', 'soft', 'Sustain a stable velocity so the policy can be deployed on real robots.'),
    Task('minimal-time', 'soft', 'Complete the mission in the shortest possible time.'),
)

SYSTEM_TEXT = """\
You are a reward function designer for multi-agent reinforcement learning.
A team of agents must move to a destination together while keeping a formation
and avoiding obstacles. Each agent's reward is computed every step by a program
you write in a small expression language; the team is trained on the mean of
the agents' rewards."""

LANGUAGE_TEXT = """\
The reward language:
  program    := { 'let' NAME '=' expr ';' } expr [';']
  expr       := numbers, context variables, let-bound names,
                + - * /, unary -, < <= > >= ==, and or not,
                if(condition, then, else), and the functions
                abs exp log sqrt tanh (1 argument), min max pow (2), clamp(x, lo, hi)
  Comparisons and and/or/not produce conditions, which are only allowed as
  operands of and/or/not and as the first argument of if. Comments start with #.
  Division by zero, log of a non-positive value and sqrt of a negative value
  are errors. Results are clamped to [-1e6, 1e6]."""

# denylist of training statistics that describe reward magnitudes
REWARD_STAT_KEYS = ('mean_reward', 'episode_reward', 'cumulative_reward', 'reward_sum', 'return')

_PHASES = ('init', 'tune')

@dataclass
class FeedbackEntry:
    iteration: int
    phase: str
    reward_source: str
    report_text: typing.Optional[str] = None
    converged: typing.Optional[bool] = None
    policy_summary: typing.Optional[dict] = None
    note: typing.Optional[str] = None

    def order_key(self):
        return (_PHASES.index(self.phase), self.iteration)

    def render(self):
        lines = [f'--- {self.phase} iteration {self.iteration} ---',
                 'reward program:', '```rdsl', self.reward_source.rstrip('\n'), '```']
        if self.report_text is not None:
            lines.append(self.report_text.rstrip('\n'))
        if self.policy_summary:
            lines.append('training summary:')
            lines.extend(_format_summary(self.policy_summary))
        if self.note:
            lines.append(f'note: {self.note}')
        return '\n'.join(lines)

@dataclass
class PromptState:
    system: str
    schema: str
    tasks: tuple
    schema_version: str = SCHEMA_VERSION
    history: typing.List[FeedbackEntry] = field(default_factory=list)

    def add(self, entry: FeedbackEntry):
        if self.history and entry.order_key() <= self.history[-1].order_key():
            raise InputError(f'feedback for {entry.phase} iteration {entry.iteration} arrives out of order')
        self.history.append(entry)

    def user_text(self):
        hard = [t for t in self.tasks if t.priority == 'hard']
        soft = [t for t in self.tasks if t.priority == 'soft']
        lines = [self.schema, '', LANGUAGE_TEXT, '',
                 'The reward must address all of these tasks:']
        lines.extend(f'  {i}. {t.text}' for i, t in enumerate(hard, start=1))
        if soft:
            lines.append('Once those are achieved, also satisfy as far as possible:')
            lines.extend(f'  {i}. {t.text}' for i, t in enumerate(soft, start=len(hard) + 1))
        if not self.history:
            lines.append('')
            lines.append('Start with a simple reward that focuses on reaching the destination; '
                         'the other tasks will be added once training converges.')
        else:
            lines.append('')
            lines.append('Previous iterations, with the evaluation of the trained policies:')
            for entry in self.history:
                lines.append(entry.render())
            lines.append('')
            lines.append('Revise the reward program to improve the evaluation metrics.')
        lines.append('')
        lines.append('Reply with exactly one reward program in a fenced code block.')
        return '\n'.join(lines) + '\n'

    def messages(self):
        return [{'role': 'system', 'content': self.system},
                {'role': 'user', 'content': self.user_text()}]

def build_initial_prompt(schema=None, tasks=DEFAULT_TASKS) -> PromptState:
    """ The first prompt: designer role, context schema and the prioritized task list """
    schema = schema if schema is not None else schema_text()
    if SCHEMA_VERSION not in schema:
        raise ConfigurationError(f'observation schema does not match the reward context {SCHEMA_VERSION}')
    for t in tasks:
        if t.priority not in ('hard', 'soft'):
            raise ConfigurationError(f'task "{t.name}" has priority "{t.priority}", expected hard or soft')
    ordered = tuple(t for t in tasks if t.priority == 'hard') + tuple(t for t in tasks if t.priority == 'soft')
    return PromptState(system=SYSTEM_TEXT, schema=schema, tasks=ordered)

def _format_value(value):
    if isinstance(value, bool):
        return 'yes' if value else 'no'
    if isinstance(value, float):
        return f'{value:.6g}'
    return str(value)

def _format_summary(summary):
    return [f'{key}: {_format_value(summary[key])}' for key in sorted(summary)]

def format_feedback(report: EvalReport, training: TrainingSummary = None) -> str:
    """ The evaluation metrics and the loss-convergence flag, in a stable form """
    text = 'evaluation:\n' + report.serialize()
    if training is not None:
        text += f'loss_converged: {_format_value(training.converged)}\n'
    return text

# ---------------------------------------------------------------------------
# Candidates

_FENCE_RE = re.compile(r'```[^\n`]*\n(.*?)```', re.DOTALL)

def extract_program_text(response: str):
    match = _FENCE_RE.search(response)
    return None if match is None else match.group(1)

@dataclass
class Attempt:
    response: str
    diagnostics: typing.List[str] = field(default_factory=list)

    def to_record(self):
        return {'response': self.response, 'diagnostics': list(self.diagnostics)}

@dataclass
class Candidate:
    program: RewardProgram
    attempts: typing.List[Attempt]

    @property
    def retries(self):
        return len(self.attempts) - 1

def request_reward_program(backend, prompt: PromptState, retry_limit=3) -> Candidate:
    """ Ask for a program, re-prompting with the diagnostics until one validates

    At most `retry_limit` requests are made.
    """
    messages = prompt.messages()
    attempts = []
    for _ in range(retry_limit):
        response = backend.complete(messages)
        attempt = Attempt(response)
        attempts.append(attempt)
        text = extract_program_text(response)
        if text is None:
            attempt.diagnostics.append('the reply contains no fenced code block')
        else:
            try:
                program = compile_reward(RewardSource(text, 'llm'))
                return Candidate(program, attempts)
            except DslError as err:
                attempt.diagnostics.extend(d.format() for d in err.diagnostics())
        logging.warn('reward candidate rejected', *attempt.diagnostics)
        messages = messages + [
            {'role': 'assistant', 'content': response},
            {'role': 'user', 'content': 'The program is invalid:\n' + '\n'.join(attempt.diagnostics)
                                        + '\nReply with a corrected program in a fenced code block.\n'}]
    raise CandidateFailure(attempts)

# ---------------------------------------------------------------------------
# Initialization and tuning

@dataclass
class TuneConfig:
    eta: float = 0.5
    max_init_iterations: int = 5
    tuning_iterations: int = 3
    retry_limit: int = 3
    init_preset: str = 'simple'
    tune_preset: str = 'complex'

    def __post_init__(self):
        if not 0 <= self.eta <= 1:
            raise ConfigurationError(f'eta must be in [0, 1], got {self.eta}')
        if self.tuning_iterations < 1:
            raise ConfigurationError(f'tuning_iterations must be at least 1, got {self.tuning_iterations}')
        if self.max_init_iterations < 1 or self.retry_limit < 1:
            raise ConfigurationError('max_init_iterations and retry_limit must be at least 1')

@dataclass
class LoopContext:
    """ Everything an iteration needs besides the backend """
    tune: TuneConfig
    ppo: PpoConfig
    evaluation: EvalConfig
    init_world: world.WorldConfig
    tune_world: world.WorldConfig
    seed: int
    journal: typing.Any = None                  # anything with write(record)
    metrics: typing.Optional[RecordWriter] = None
    output_dir: typing.Optional[str] = None

    def record(self, record):
        if self.journal is not None:
            self.journal.write(record)

    def save(self, team: AgentTeam, name, meta):
        if self.output_dir is None:
            return None
        relative = os.path.join('checkpoints', name)
        team.save(os.path.join(self.output_dir, relative), meta)
        return relative

_INIT_PHASE = 1
_TUNE_PHASE = 2

@dataclass
class IterationRecord:
    phase: str
    k: int
    prompt: list
    attempts: typing.List[Attempt]
    decision: str
    reward: typing.Optional[str] = None
    trained_reward: typing.Optional[str] = None
    training: typing.Optional[dict] = None
    report: typing.Optional[EvalReport] = None
    checkpoint: typing.Optional[str] = None
    note: typing.Optional[str] = None

    def to_record(self):
        return {'kind': 'iteration',
                'phase': self.phase,
                'k': self.k,
                'prompt': self.prompt,
                'attempts': [a.to_record() for a in self.attempts],
                'reward': self.reward,
                'trained_reward': self.trained_reward,
                'training': self.training,
                'report': None if self.report is None else self.report.to_record(),
                'decision': self.decision,
                'checkpoint': self.checkpoint,
                'note': self.note}

@dataclass
class InitResult:
    program: RewardProgram
    team: AgentTeam
    prompt: PromptState
    report: EvalReport
    records: typing.List[IterationRecord]

@dataclass
class TuneResult:
    program: RewardProgram
    team: AgentTeam
    records: typing.List[IterationRecord]
    reports: typing.List[EvalReport]

def _failure_note(failure: CandidateFailure):
    last = failure.attempts[-1].diagnostics if failure.attempts else []
    return 'the requested program was rejected: ' + ('; '.join(last) or 'no valid program')

def run_initialization(backend, ctx: LoopContext, prompt: PromptState = None) -> InitResult:
    """ Generate, train and evaluate candidates in the simple environment until
    one reaches a success rate of at least eta
    """
    prompt = prompt or build_initial_prompt()
    records = []
    for k in range(ctx.tune.max_init_iterations):
        snapshot = prompt.messages()
        try:
            candidate = request_reward_program(backend, prompt, ctx.tune.retry_limit)
        except CandidateFailure as failure:
            record = IterationRecord('init', k, snapshot, failure.attempts, 'reject-candidate',
                                     note=_failure_note(failure))
            records.append(record)
            ctx.record(record.to_record())
            prompt.add(FeedbackEntry(k, 'init', failure.attempts[-1].response, note=record.note))
            continue

        source = pretty_print(candidate.program)
        team = AgentTeam.create(ctx.init_world, ctx.ppo, world.derive_seed(ctx.seed, _INIT_PHASE, k))
        try:
            training = train_until_converged(team, ctx.init_world, candidate.program, ctx.ppo,
                                             world.derive_seed(ctx.seed, _INIT_PHASE, k, 1),
                                             metrics=ctx.metrics, label=f'init-{k}')
        except RewardEvaluationError as err:
            logging.warn('reward candidate failed during training', err.message)
            record = IterationRecord('init', k, snapshot, candidate.attempts, 'reject-candidate',
                                     reward=source, note=err.reason)
            records.append(record)
            ctx.record(record.to_record())
            prompt.add(FeedbackEntry(k, 'init', source, note=err.reason))
            continue

        report = run_evaluation(team.policies, ctx.init_world, ctx.evaluation)
        accepted = report.success_rate >= ctx.tune.eta
        checkpoint = ctx.save(team, f'init_{k}.ckpt', {'phase': 'init', 'k': k, 'reward': source})
        record = IterationRecord('init', k, snapshot, candidate.attempts,
                                 'accept' if accepted else 'continue',
                                 reward=source, trained_reward=source,
                                 training=training.policy_summary(), report=report,
                                 checkpoint=checkpoint)
        records.append(record)
        ctx.record(record.to_record())
        logging.info(f'initialization iteration {k}: success rate {report.success_rate:.3f}')
        if accepted:
            return InitResult(candidate.program, team, prompt, report, records)
        prompt.add(FeedbackEntry(k, 'init', source, format_feedback(report, training),
                                 training.converged, training.policy_summary()))
    raise InitializationError(records, ctx.tune.eta)

def _train_with_fallback(team, ctx, program, fallback, seed, label):
    try:
        return program, train_until_converged(team, ctx.tune_world, program, ctx.ppo, seed,
                                              metrics=ctx.metrics, label=label), None
    except RewardEvaluationError as err:
        if fallback is None or fallback is program:
            raise
        logging.warn('reward program failed during training, falling back to the previous one', err.message)
        summary = train_until_converged(team, ctx.tune_world, fallback, ctx.ppo, seed,
                                        metrics=ctx.metrics, label=label)
        return fallback, summary, err.reason

def run_tuning(backend, init: InitResult, ctx: LoopContext) -> TuneResult:
    """ Continue training the initialized team in the complex environment,
    revising the reward program after every training phase
    """
    team = init.team
    prompt = init.prompt
    program = init.program
    fallback = None
    records = []
    reports = []
    for k in range(1, ctx.tune.tuning_iterations + 1):
        trained, training, note = _train_with_fallback(team, ctx, program, fallback,
                                                       world.derive_seed(ctx.seed, _TUNE_PHASE, k),
                                                       f'tune-{k}')
        trained_source = pretty_print(trained)
        report = run_evaluation(team.policies, ctx.tune_world, ctx.evaluation)
        reports.append(report)
        prompt.add(FeedbackEntry(k, 'tune', trained_source, format_feedback(report, training),
                                 training.converged, training.policy_summary(), note))
        snapshot = prompt.messages()
        checkpoint = ctx.save(team, f'tune_{k}.ckpt', {'phase': 'tune', 'k': k, 'reward': trained_source})
        try:
            candidate = request_reward_program(backend, prompt, ctx.tune.retry_limit)
            fallback = trained
            program = candidate.program
            record = IterationRecord('tune', k, snapshot, candidate.attempts,
                                     'accept' if k == ctx.tune.tuning_iterations else 'continue',
                                     reward=pretty_print(program), trained_reward=trained_source,
                                     training=training.policy_summary(), report=report,
                                     checkpoint=checkpoint, note=note)
        except CandidateFailure as failure:
            program = trained
            record = IterationRecord('tune', k, snapshot, failure.attempts, 'reject-candidate',
                                     trained_reward=trained_source, training=training.policy_summary(),
                                     report=report, checkpoint=checkpoint, note=_failure_note(failure))
        records.append(record)
        ctx.record(record.to_record())
        logging.info(f'tuning iteration {k}: success rate {report.success_rate:.3f}')
    return TuneResult(program, team, records, reports)

def report_rows(init: InitResult, tune: TuneResult):
    """ Iteration x (success rate %, average time s, formation error) """
    rows = []
    for k, report in enumerate([init.report] + list(tune.reports)):
        rows.append({'iteration': k,
                     'success_rate_pct': 100.0 * report.success_rate,
                     'average_time_s': report.total_time_mean,
                     'formation_error': report.formation_error_mean})
    return rows

def journal_header(ctx: LoopContext, config_document):
    return {'kind': 'header', 'format': JOURNAL_FORMAT, 'schema': SCHEMA_VERSION,
            'seed': ctx.seed, 'config': config_document}

def run_loop(backend, ctx: LoopContext, config_document=None):
    """ Initialization followed by tuning, journaled from header to summary """
    ctx.record(journal_header(ctx, config_document))
    init = run_initialization(backend, ctx)
    tune = run_tuning(backend, init, ctx)
    rows = report_rows(init, tune)
    ctx.record({'kind': 'summary',
                'iterations': len(init.records) + len(tune.records),
                'table': rows,
                'final_reward': pretty_print(tune.program)})
    return init, tune, rows

# ---------------------------------------------------------------------------
# Journals

class MemoryJournal:

    def __init__(self):
        self.records = []

    def write(self, record):
        self.records.append(record)

def read_journal(path):
    try:
        records = read_records(path)
    except InputError as err:
        raise JournalError(err.reason, location=err.location)
    if not records or records[0].get('kind') != 'header':
        raise JournalError('journal does not start with a header record', location=path)
    if records[0].get('format') != JOURNAL_FORMAT:
        raise JournalError(f'unsupported journal format {records[0].get("format")!r}', location=path)
    if records[-1].get('kind') != 'summary':
        raise JournalError('journal has no summary record (truncated run?)', location=path)
    return records

def journal_responses(records):
    """ Every archived reply, in the order the loop requested them """
    responses = []
    for record in records:
        if record.get('kind') == 'iteration':
            responses.extend(a['response'] for a in record['attempts'])
    return responses

class _ArchivedBackend:

    def __init__(self, responses):
        self.responses = list(responses)
        self.position = 0

    def complete(self, messages):
        if self.position >= len(self.responses):
            raise JournalError('the loop requested more replies than the journal holds')
        response = self.responses[self.position]
        self.position += 1
        return response

def verify_replay(records, ctx: LoopContext):
    """ Re-run the loop against the journal's replies and compare every record

    Raises ReplayDivergence at the first record that differs.
    """
    journal = MemoryJournal()
    ctx.journal = journal
    backend = _ArchivedBackend(journal_responses(records))
    saved_checkpoints = any(r.get('checkpoint') for r in records if r.get('kind') == 'iteration')
    with tempfile.TemporaryDirectory() as scratch:
        ctx.output_dir = scratch if saved_checkpoints else None
        try:
            run_loop(backend, ctx, records[0].get('config'))
        except (InitializationError, JournalError):
            pass
    for index, expected in enumerate(records):
        if index >= len(journal.records):
            raise ReplayDivergence(index, expected, {})
        actual = journal.records[index]
        if dump_record(expected) != dump_record(actual):
            raise ReplayDivergence(index, expected, actual)
    if len(journal.records) != len(records):
        raise ReplayDivergence(len(records), {'kind': 'end of journal'}, journal.records[len(records)])
    return len(records)
