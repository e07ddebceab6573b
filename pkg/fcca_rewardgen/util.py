import argparse
import errno
import os.path

import fcca_rewardgen.logging as logging
import fcca_rewardgen.world as world
from fcca_rewardgen.backend import make_backend
from fcca_rewardgen.config import build_default_options, process_config_file, process_config_document
from fcca_rewardgen.evaluation import PROTOCOLS, evaluate_traces, load_traces, run_evaluation
from fcca_rewardgen.exception import ConfigurationError, RewardGenError
from fcca_rewardgen.files import RecordWriter, write_atomically
from fcca_rewardgen.llm_loop import read_journal, run_loop, verify_replay
from fcca_rewardgen.plot import emit_plots, report_table_csv, report_table_text
from fcca_rewardgen.ppo import AgentTeam, train_until_converged
from fcca_rewardgen.rewarddsl import DslError, compile_reward, load_reward_source, pretty_print, schema_text

VERSION = '0.3.0'

def _report_dsl_error(path, err: DslError):
    for d in err.diagnostics():
        logging.error(f'{d.code}: {d.message}', location=f'{path}:{d.offset}')

def _load_program(spec):
    source = load_reward_source(spec)
    return compile_reward(source)

def _options(arguments, defaults):
    if getattr(arguments, 'config', None):
        options = process_config_file(arguments.config, defaults)
    else:
        options = process_config_document({}, defaults, base_dir=os.getcwd())
    if getattr(arguments, 'output', None):
        options.output = arguments.output
    if getattr(arguments, 'workers', None):
        options.ppo.num_workers = arguments.workers
        options.evaluation.num_workers = arguments.workers
    return options

def _handle_errors(func, arguments, options):
    """ Run a command, mapping typed errors to messages and exit codes """
    try:
        return func(arguments, options)
    except FileNotFoundError as err:
        logging.error(f'File "{err.filename}" not found.', 'No output produced.')
        return errno.ENOENT
    except IsADirectoryError as err:
        logging.error(f'"{err.filename}" is a directory.', 'No output produced.')
        return errno.EISDIR
    except ConfigurationError as err:
        logging.error(f'{err.message}.', 'Exiting.')
        return errno.EINVAL
    except DslError as err:
        logging.error('invalid reward program:', err.message)
        return 1
    except RewardGenError as err:
        logging.error(err.message)
        return 1

def _arg_train(arguments, options):
    """ Train a team with a fixed reward program until its loss converges """
    options = _options(arguments, options)
    try:
        program = _load_program(arguments.reward)
    except DslError as err:
        _report_dsl_error(arguments.reward, err)
        return 1
    world_config = options.world_config(arguments.preset)
    ppo = options.ppo
    if arguments.batches:
        ppo.max_batches = arguments.batches
    team = AgentTeam.create(world_config, ppo, options.seed)
    logging.info(f'training {team.num_agents} agents ({team.parameter_count()} parameters) '
                 f'in the {world_config.preset} world')
    with RecordWriter(os.path.join(options.output, 'metrics.jsonl')) as metrics:
        summary = train_until_converged(team, world_config, program, ppo, options.seed,
                                        metrics=metrics, label='train')
    team.save(os.path.join(options.output, 'checkpoint.ckpt'),
              {'reward': pretty_print(program), 'preset': world_config.preset,
               'batches': summary.batches, 'converged': summary.converged})
    print(f'trained {summary.batches} batches, converged: {"yes" if summary.converged else "no"}')
    return 0

def _arg_eval(arguments, options):
    """ Evaluate a checkpoint, or score externally produced traces """
    options = _options(arguments, options)
    eval_config = options.evaluation
    if arguments.protocol:
        eval_config = eval_config.with_protocol(arguments.protocol)
    if arguments.episodes:
        eval_config.episodes = arguments.episodes
    if arguments.trace_dir:
        eval_config.trace_dir = arguments.trace_dir

    if arguments.traces:
        report = evaluate_traces(load_traces(arguments.traces), eval_config)
    else:
        if not arguments.checkpoint:
            raise ConfigurationError('a checkpoint or --traces is required')
        team = AgentTeam.load(arguments.checkpoint, options.ppo)
        world_config = options.world_config(arguments.preset or eval_config.preset)
        team.check_compatible(world_config)
        report = run_evaluation(team.policies, world_config, eval_config)
    text = report.serialize()
    print(text, end='')
    write_atomically(os.path.join(options.output, 'eval_report.txt'), text)
    return 0

def _arg_tune(arguments, options):
    """ Reward initialization followed by online tuning """
    options = _options(arguments, options)
    backend = make_backend(options.backend)
    journal = RecordWriter(os.path.join(options.output, 'journal.jsonl'))
    metrics = RecordWriter(os.path.join(options.output, 'metrics.jsonl'))
    ctx = options.loop_context(journal=journal, metrics=metrics, output_dir=options.output)
    committed = False
    try:
        _, _, rows = run_loop(backend, ctx, options.document)
        committed = True
    finally:
        journal.close(commit=committed)
        metrics.close(commit=committed)
        if hasattr(backend, 'close'):
            backend.close()
    write_atomically(os.path.join(options.output, 'report_table.csv'), report_table_csv(rows))
    table = report_table_text(rows)
    write_atomically(os.path.join(options.output, 'report_table.txt'), table)
    print(table, end='')
    return 0

def _arg_replay(arguments, options):
    """ Re-run a journaled tune loop against its archived replies """
    records = read_journal(arguments.journal)
    options = process_config_document(records[0].get('config'), options,
                                      base_dir=os.path.dirname(os.path.abspath(arguments.journal)))
    count = verify_replay(records, options.loop_context())
    print(f'replay matches all {count} journal records')
    return 0

def _arg_plot(arguments, options):
    """ Reward curves and CSV extracts of metrics files """
    rows = None
    if arguments.journal:
        summary = read_journal(arguments.journal)[-1]
        rows = summary.get('table')
    labels = arguments.labels.split(',') if arguments.labels else None
    for path in emit_plots(arguments.inputs, arguments.output, labels, rows):
        print(path)
    return 0

def _arg_dsl_check(arguments, options):
    """ Validate reward programs; prints nothing but diagnostics unless -v is given """
    if arguments.schema:
        print(schema_text())
    status = 0
    for path in arguments.inputs:
        try:
            _load_program(path)
            logging.info(f'{path}: ok')
        except DslError as err:
            _report_dsl_error(path, err)
            status = 1
    return status

def _arg_dsl_format(arguments, options):
    try:
        program = _load_program(arguments.input)
    except DslError as err:
        _report_dsl_error(arguments.input, err)
        return 1
    print(pretty_print(program))
    return 0

def _add_run_arguments(parser, workers=True):
    parser.add_argument('-c', metavar='config',
                        dest='config',
                        help='The YAML run configuration')
    parser.add_argument('-o', metavar='output',
                        dest='output',
                        help='Override the output directory of the configuration')
    if workers:
        parser.add_argument('-j', metavar='workers',
                            dest='workers', type=int,
                            help='Number of worker processes for episode collection')

def _build_parser():
    parser = argparse.ArgumentParser(prog='fcca-rewardgen')

    parser.add_argument('--version', action='version',
                        version=f'FCCA-REWARDGEN {VERSION}',
                        help="Print the version information")
    parser.add_argument('-v', action='store_true',
                        dest='verbose',
                        help='Print progress information')
    subparsers = parser.add_subparsers()

    train_parser = subparsers.add_parser('train', aliases=['t'],
                                         help="Train policies with a fixed reward program")
    train_parser.add_argument('reward',
                              help="A .rdsl file, or builtin:<name>")
    _add_run_arguments(train_parser)
    train_parser.add_argument('-p', metavar='preset', dest='preset',
                              choices=world.PRESETS,
                              help="Environment preset (default: world.preset of the configuration)")
    train_parser.add_argument('-n', metavar='batches', dest='batches', type=int,
                              help="Cap on the number of training batches")
    train_parser.set_defaults(func=_arg_train)

    eval_parser = subparsers.add_parser('eval', aliases=['e'],
                                        help="Evaluate a checkpoint",
                                        description="Runs the evaluation episodes of the configuration with the policies of a checkpoint and prints the report. With --traces, scores externally produced episode traces instead.")
    eval_parser.add_argument('checkpoint', nargs='?',
                             help="Checkpoint written by train or tune")
    _add_run_arguments(eval_parser)
    eval_parser.add_argument('-p', metavar='preset', dest='preset',
                             choices=world.PRESETS,
                             help="Environment preset (default: eval.preset of the configuration)")
    eval_parser.add_argument('--protocol', choices=sorted(PROTOCOLS),
                             help="default: 1 seed x 20 episodes; table2: 3 seeds x 300 episodes")
    eval_parser.add_argument('--episodes', type=int,
                             help="Episodes per seed")
    eval_parser.add_argument('--traces', metavar='file',
                             help="Score the episode traces in this line-delimited file")
    eval_parser.add_argument('--trace-dir', metavar='dir', dest='trace_dir',
                             help="Write one trace file per evaluated episode")
    eval_parser.set_defaults(func=_arg_eval)

    tune_parser = subparsers.add_parser('tune',
                                        help="Generate and tune a reward program with the LLM loop")
    _add_run_arguments(tune_parser)
    tune_parser.set_defaults(func=_arg_tune)

    replay_parser = subparsers.add_parser('replay', aliases=['r'],
                                          help="Verify that a tune journal reproduces")
    replay_parser.add_argument('journal',
                               help="journal.jsonl written by tune")
    replay_parser.set_defaults(func=_arg_replay)

    plot_parser = subparsers.add_parser('plot', aliases=['p'],
                                        help="Plot training metrics")
    plot_parser.add_argument('inputs', nargs='+',
                             metavar='metrics files',
                             help="metrics.jsonl files; several are overlaid")
    plot_parser.add_argument('-o', metavar='output', dest='output', default='plots',
                             help="Directory for the images and CSV files")
    plot_parser.add_argument('-l', metavar='labels', dest='labels',
                             help="Comma separated curve labels")
    plot_parser.add_argument('--journal', metavar='file',
                             help="Also plot the iteration metrics of a tune journal")
    plot_parser.set_defaults(func=_arg_plot)

    check_parser = subparsers.add_parser('dsl-check', aliases=['check'],
                                         help="Validate reward programs")
    check_parser.add_argument('inputs', nargs='*',
                              metavar='reward files',
                              help="The .rdsl files to check")
    check_parser.add_argument('--schema', action='store_true',
                              help="Print the context variables available to programs")
    check_parser.set_defaults(func=_arg_dsl_check)

    format_parser = subparsers.add_parser('dsl-format', aliases=['fmt'],
                                          help="Print the canonical form of a reward program")
    format_parser.add_argument('input', metavar='reward file')
    format_parser.set_defaults(func=_arg_dsl_format)

    return parser

def dispatch_from_arguments(arguments, options=None):
    """ Parse the command line and run the selected command; returns the exit code """

    parser = _build_parser()

    if not len(arguments) > 0:
        parser.print_help()
        return 1

    args = parser.parse_args(arguments)
    if not hasattr(args, 'func'):
        parser.print_help()
        return 1
    logging.set_verbose(args.verbose)

    return _handle_errors(args.func, args, options or build_default_options())
