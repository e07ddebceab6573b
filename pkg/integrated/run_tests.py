import argparse
import filecmp
import os
import shutil
import sys

import framework
from framework import TestOptions

import fcca_rewardgen.world as world
from fcca_rewardgen.evaluation import EvalConfig, run_evaluation
from fcca_rewardgen.files import RecordWriter, read_records, write_atomically
from fcca_rewardgen.ppo import AgentTeam, PpoConfig, train_until_converged
from fcca_rewardgen.rewarddsl import compile_reward, load_reward_source, pretty_print
from fcca_rewardgen.util import dispatch_from_arguments

def gen_fn(inputfile, outputfile):
    program = compile_reward(load_reward_source(inputfile))
    write_atomically(outputfile, pretty_print(program) + '\n')

tests = [
    ('inputs/builtin_full.rdsl', 'outputs/builtin-full.rdsl', {}),
    ('inputs/logic_precedence.rdsl', 'outputs/logic-precedence.rdsl', {}),
    ('inputs/unary_and_calls.rdsl', 'outputs/unary-and-calls.rdsl', {}),
    ('inputs/canonical.rdsl', 'outputs/canonical.rdsl', {}),
    ('inputs/unknown_identifier.rdsl', None, {TestOptions.THROWS_EXCEPTION: True}),
    ('inputs/condition_as_number.rdsl', None, {TestOptions.THROWS_EXCEPTION: True}),
    ('inputs/duplicate_binding.rdsl', None, {TestOptions.THROWS_EXCEPTION: True}),
]

def check_tune_reproduces(workdir):
    """ Two tune runs against the same replies write identical journals, and the journal replays """
    runs = [os.path.join(workdir, name) for name in ('first', 'second')]
    for run in runs:
        status = dispatch_from_arguments(['tune', '-c', 'inputs/tune_replay.yaml', '-o', run])
        if status != 0:
            return f'tune exited with status {status}'
    for name in ('journal.jsonl', 'metrics.jsonl', 'report_table.csv'):
        if not filecmp.cmp(os.path.join(runs[0], name), os.path.join(runs[1], name), shallow=False):
            return f'{name} differs between identical runs'
    table = read_records(os.path.join(runs[0], 'journal.jsonl'))[-1]['table']
    if [row['iteration'] for row in table] != [0, 1, 2, 3]:
        return f'unexpected report table {table}'
    status = dispatch_from_arguments(['replay', os.path.join(runs[0], 'journal.jsonl')])
    if status != 0:
        return f'replay exited with status {status}'
    return None

def check_goal_reward_learns(workdir):
    """ In the empty world the goal reward reaches a 95% success rate within
    2000 training episodes for at least two of three seeds
    """
    config = world.preset('empty')
    ppo = PpoConfig(max_batches=250, num_workers=min(4, os.cpu_count() or 1))
    program = compile_reward(load_reward_source('builtin:goal'))
    rates = []
    for seed in range(3):
        team = AgentTeam.create(config, ppo, seed)
        with RecordWriter(os.path.join(workdir, f'metrics_{seed}.jsonl')) as metrics:
            train_until_converged(team, config, program, ppo, seed, metrics=metrics, label=f'seed-{seed}')
        rates.append(run_evaluation(team.policies, config, EvalConfig(seeds=(seed,))).success_rate)
    if sum(rate >= 0.95 for rate in rates) < 2:
        return f'success rates per seed: {rates}'
    return None

def test_file_generation(smoke=False):
    cur_dir = os.getcwd()
    file_dir = os.path.dirname(os.path.realpath(__file__))
    os.chdir(file_dir)

    checks = [('tune-reproduces', check_tune_reproduces)]
    if smoke:
        checks.append(('goal-reward-learns', check_goal_reward_learns))
    output_dir = ".output"
    success = framework.run_tests(tests, gen_fn, output_dir, sys.stdout, checks)
    if success:
        shutil.rmtree(output_dir)

    os.chdir(cur_dir)
    return success

if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument('--smoke', action='store_true',
                        help='Also train with the goal reward in the empty world (slow)')
    arguments = parser.parse_args()
    if test_file_generation(arguments.smoke):
        exit(0)
    else:
        exit(1)
