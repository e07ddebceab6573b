""" The reward expression language

Every reward function, whether written by hand or returned by an LLM, is a
program in this small language:

    # comments run to the end of the line
    let d = goal_dist;
    let near = if(min_obstacle_dist < 0.5, -10, 0);
    -d + near + 100 * reached_goal

A program is a sequence of `let name = expr;` bindings followed by the
reward expression. There are no loops, no user functions and no state, so
evaluation always terminates. Identifiers must be context variables (see
CONTEXT_SCHEMA) or earlier bindings; this is checked by `validate` before a
program is ever evaluated.

The pipeline is `tokenize` -> `parse` -> `validate` -> `evaluate`;
`compile_reward` runs the first three and raises on the first failure.
`pretty_print` returns the canonical, fully parenthesized source.
"""

import math
import os.path
import re
import typing
import dataclasses
from dataclasses import dataclass, field

from fcca_rewardgen.exception import RewardGenError

SCHEMA_VERSION = 'fcca-context/1'
NO_OBSTACLE_DISTANCE = 1e6
REWARD_LIMIT = 1e6
MAX_DEPTH = 64
# the parser gives up well before Python's own recursion limit
_MAX_NESTING = 200

@dataclass(frozen=True)
class ContextVariable:
    name: str
    unit: str
    description: str

CONTEXT_SCHEMA = (
    ContextVariable('goal_dist', 'm', 'distance from the agent to the destination'),
    ContextVariable('goal_dx', 'm', 'destination x offset in the agent frame (forward)'),
    ContextVariable('goal_dy', 'm', 'destination y offset in the agent frame (left)'),
    ContextVariable('speed', 'm/s', 'current speed of the agent'),
    ContextVariable('heading', 'rad', 'current heading of the agent, in (-pi, pi]'),
    ContextVariable('formation_error', '-', 'formation error of the whole team, 0 when the shape is exact'),
    ContextVariable('min_obstacle_dist', 'm',
                    f'center distance to the nearest visible obstacle, {NO_OBSTACLE_DISTANCE:g} when none is visible'),
    ContextVariable('nearest_obstacle_closing_speed', 'm/s',
                    'rate at which the nearest visible obstacle approaches (positive = approaching)'),
    ContextVariable('accel', 'm/s^2', 'magnitude of the velocity change over the last step'),
    ContextVariable('time_frac', '-', 'elapsed fraction of the episode step limit'),
    ContextVariable('reached_goal', 'flag', '1 when the team centroid reached the destination this step'),
    ContextVariable('collision', 'flag', '1 when this agent collided this step'),
    ContextVariable('num_visible_obstacles', 'count', 'number of obstacles within sensing range'),
)

CONTEXT_NAMES = frozenset(v.name for v in CONTEXT_SCHEMA)
_FLAG_NAMES = frozenset(v.name for v in CONTEXT_SCHEMA if v.unit == 'flag')

# name -> arity
BUILTINS = {
    'abs': 1, 'exp': 1, 'log': 1, 'sqrt': 1, 'tanh': 1,
    'min': 2, 'max': 2, 'pow': 2,
    'clamp': 3,
}

KEYWORDS = frozenset(['let', 'if', 'and', 'or', 'not'])

def schema_text():
    """ The context catalogue as embedded in LLM prompts """
    lines = [f'context schema {SCHEMA_VERSION}:']
    for v in CONTEXT_SCHEMA:
        lines.append(f'  {v.name} [{v.unit}]: {v.description}')
    return '\n'.join(lines)

class DslError(RewardGenError):

    def __init__(self, msg, offset=None):
        self.offset = offset
        self.reason = msg
        super().__init__(msg, location=None if offset is None else f'offset {offset}')

    def diagnostics(self):
        return [Diagnostic(self.offset or 0, 'error', self.reason)]

class DslLexError(DslError):

    def diagnostics(self):
        return [Diagnostic(self.offset, 'lex', self.reason)]

class DslSyntaxError(DslError):

    def __init__(self, msg, offset, expected=()):
        self.expected = frozenset(expected)
        if self.expected:
            msg = msg + ' (expected ' + ', '.join(sorted(self.expected)) + ')'
        super().__init__(msg, offset)

    def diagnostics(self):
        return [Diagnostic(self.offset, 'syntax', self.reason)]

class DslValidationError(DslError):

    def __init__(self, diagnostics):
        self._diagnostics = list(diagnostics)
        super().__init__('; '.join(d.format() for d in self._diagnostics),
                         self._diagnostics[0].offset if self._diagnostics else None)

    def diagnostics(self):
        return list(self._diagnostics)

class DslDomainError(DslError):
    """ Evaluation left the domain of an operation (log of a non-positive value, x/0, ...) """

    def __init__(self, msg, offset, expression):
        self.expression = expression
        super().__init__(f'{msg} in `{expression}`', offset)

@dataclass(frozen=True)
class Diagnostic:
    offset: int
    code: str
    message: str

    def format(self):
        return f'offset {self.offset}: {self.code}: {self.message}'

@dataclass(frozen=True)
class RewardSource:
    text: str
    origin: str = 'file'

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise DslError('reward source is empty')
        if self.origin not in ('llm', 'file', 'builtin'):
            raise DslError(f'unknown reward source origin "{self.origin}"')

@dataclass(frozen=True)
class EvalContext:
    goal_dist: float
    goal_dx: float
    goal_dy: float
    speed: float
    heading: float
    formation_error: float
    min_obstacle_dist: float
    nearest_obstacle_closing_speed: float
    accel: float
    time_frac: float
    reached_goal: float
    collision: float
    num_visible_obstacles: float

    def __post_init__(self):
        for name in CONTEXT_NAMES:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise DslError(f'context variable {name} is not finite: {value}')
            if name in _FLAG_NAMES and value not in (0.0, 1.0):
                raise DslError(f'context flag {name} must be 0 or 1, got {value}')
            object.__setattr__(self, name, value)

    def as_dict(self):
        return {v.name: getattr(self, v.name) for v in CONTEXT_SCHEMA}

# ---------------------------------------------------------------------------
# Tokens

@dataclass(frozen=True)
class Token:
    kind: str       # number, ident, keyword, op, eof
    text: str
    offset: int
    value: float = None

    def describe(self):
        if self.kind == 'eof':
            return 'end of input'
        return f"'{self.text}'"

_TOKEN_RE = re.compile(rb"""
    (?P<space>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<number>(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|==|[-+*/<>(),;=])
""", re.VERBOSE)

def tokenize(source) -> typing.List[Token]:
    """ Split `source` into tokens carrying their byte offsets

    Whitespace and `#` line comments are dropped. The list always ends with
    an eof token.
    """
    text = source.text if isinstance(source, RewardSource) else source
    data = text.encode('utf-8')
    tokens = []
    pos = 0
    while pos < len(data):
        match = _TOKEN_RE.match(data, pos)
        if match is None:
            bad = data[pos:pos + 1]
            raise DslLexError(f'illegal character {bad!r}', pos)
        kind = match.lastgroup
        if kind in ('space', 'comment'):
            pos = match.end()
            continue
        lexeme = match.group(kind).decode('ascii')
        if kind == 'number':
            value = float(lexeme)
            if not math.isfinite(value):
                raise DslLexError(f'number literal {lexeme} is out of range', pos)
            tokens.append(Token('number', lexeme, pos, value))
        elif kind == 'ident':
            tokens.append(Token('keyword' if lexeme in KEYWORDS else 'ident', lexeme, pos))
        elif kind == 'op':
            tokens.append(Token('op', lexeme, pos))
        pos = match.end()
    tokens.append(Token('eof', '', len(data)))
    return tokens

# ---------------------------------------------------------------------------
# Syntax tree. Offsets point back into the source and take no part in equality.

@dataclass(frozen=True)
class Number:
    value: float
    offset: int = field(default=0, compare=False)

@dataclass(frozen=True)
class Name:
    name: str
    offset: int = field(default=0, compare=False)

@dataclass(frozen=True)
class Neg:
    operand: typing.Any
    offset: int = field(default=0, compare=False)

@dataclass(frozen=True)
class Binary:
    op: str
    left: typing.Any
    right: typing.Any
    offset: int = field(default=0, compare=False)

@dataclass(frozen=True)
class Compare:
    op: str
    left: typing.Any
    right: typing.Any
    offset: int = field(default=0, compare=False)

@dataclass(frozen=True)
class BoolOp:
    op: str
    left: typing.Any
    right: typing.Any
    offset: int = field(default=0, compare=False)

@dataclass(frozen=True)
class Not:
    operand: typing.Any
    offset: int = field(default=0, compare=False)

@dataclass(frozen=True)
class If:
    cond: typing.Any
    then: typing.Any
    otherwise: typing.Any
    offset: int = field(default=0, compare=False)

@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    offset: int = field(default=0, compare=False)

@dataclass(frozen=True)
class RewardProgram:
    bindings: tuple
    result: typing.Any
    source: RewardSource = field(default=None, compare=False, repr=False)

    def evaluate(self, ctx):
        return evaluate(self, ctx)

    def pretty(self):
        return pretty_print(self)

def children(expr):
    if isinstance(expr, (Neg, Not)):
        return (expr.operand,)
    elif isinstance(expr, (Binary, Compare, BoolOp)):
        return (expr.left, expr.right)
    elif isinstance(expr, If):
        return (expr.cond, expr.then, expr.otherwise)
    elif isinstance(expr, Call):
        return expr.args
    return ()

def depth(expr):
    """ Height of the expression tree; iterative, since a flat operator chain parses left-deep """
    deepest = 0
    stack = [(expr, 1)]
    while stack:
        node, level = stack.pop()
        deepest = max(deepest, level)
        stack.extend((k, level + 1) for k in children(node))
    return deepest

# ---------------------------------------------------------------------------
# Parser: precedence climbing over the binary operators

_BINARY_POWER = {
    'or': 1,
    'and': 2,
    '<': 4, '<=': 4, '>': 4, '>=': 4, '==': 4,
    '+': 5, '-': 5,
    '*': 6, '/': 6,
}
_NOT_POWER = 3
_UNARY_POWER = 7
_COMPARISONS = frozenset(['<', '<=', '>', '>=', '=='])
_EXPR_START = frozenset(['number', 'identifier', "'('", "'-'", "'not'", "'if'"])
_AFTER_EXPR = frozenset(['operator', 'end of input'])

class _Parser:

    def __init__(self, tokens):
        self.tokens = list(tokens)
        if not self.tokens or self.tokens[-1].kind != 'eof':
            end = self.tokens[-1].offset + len(self.tokens[-1].text) if self.tokens else 0
            self.tokens.append(Token('eof', '', end))
        self.index = 0
        self.nesting = 0

    @property
    def token(self):
        return self.tokens[self.index]

    def advance(self):
        token = self.tokens[self.index]
        if token.kind != 'eof':
            self.index += 1
        return token

    def at(self, kind, text=None):
        token = self.token
        return token.kind == kind and (text is None or token.text == text)

    def expect(self, kind, text, expected):
        if not self.at(kind, text):
            raise DslSyntaxError(f'unexpected {self.token.describe()}', self.token.offset, expected)
        return self.advance()

    def program(self):
        bindings = []
        while self.at('keyword', 'let'):
            self.advance()
            name = self.expect('ident', None, ['identifier'])
            self.expect('op', '=', ["'='"])
            value = self.expression(0)
            self.expect('op', ';', ["';'"])
            bindings.append((name.text, value))
        result = self.expression(0)
        if self.at('op', ';'):
            self.advance()
        if not self.at('eof'):
            raise DslSyntaxError(f'unexpected {self.token.describe()} after the reward expression',
                                 self.token.offset, _AFTER_EXPR)
        return RewardProgram(tuple(bindings), result)

    def _binary_power(self, token):
        if token.kind == 'op' or token.kind == 'keyword':
            return _BINARY_POWER.get(token.text, 0)
        return 0

    def expression(self, rbp):
        self.nesting += 1
        if self.nesting > _MAX_NESTING:
            raise DslSyntaxError('expression is nested too deeply', self.token.offset)
        try:
            left = self.prefix()
            while self._binary_power(self.token) > rbp:
                op = self.advance()
                power = _BINARY_POWER[op.text]
                right = self.expression(power)
                if op.text in ('and', 'or'):
                    left = BoolOp(op.text, left, right, op.offset)
                elif op.text in _COMPARISONS:
                    left = Compare(op.text, left, right, op.offset)
                else:
                    left = Binary(op.text, left, right, op.offset)
            return left
        finally:
            self.nesting -= 1

    def arguments(self):
        self.expect('op', '(', ["'('"])
        args = []
        if self.at('op', ')'):
            self.advance()
            return args
        args.append(self.expression(0))
        while self.at('op', ','):
            self.advance()
            args.append(self.expression(0))
        self.expect('op', ')', ["','", "')'"])
        return args

    def prefix(self):
        token = self.token
        if token.kind == 'number':
            self.advance()
            return Number(token.value, token.offset)
        elif token.kind == 'ident':
            self.advance()
            if self.at('op', '('):
                args = self.arguments()
                arity = BUILTINS.get(token.text)
                if arity is not None and len(args) != arity:
                    raise DslSyntaxError(
                        f'{token.text} takes {arity} argument(s), {len(args)} given', token.offset)
                return Call(token.text, tuple(args), token.offset)
            return Name(token.text, token.offset)
        elif token.kind == 'keyword' and token.text == 'if':
            self.advance()
            args = self.arguments()
            if len(args) != 3:
                raise DslSyntaxError(f'if takes 3 arguments (condition, then, else), {len(args)} given',
                                     token.offset)
            return If(args[0], args[1], args[2], token.offset)
        elif token.kind == 'keyword' and token.text == 'not':
            self.advance()
            return Not(self.expression(_NOT_POWER), token.offset)
        elif token.kind == 'op' and token.text == '-':
            self.advance()
            return Neg(self.expression(_UNARY_POWER), token.offset)
        elif token.kind == 'op' and token.text == '(':
            self.advance()
            inner = self.expression(0)
            self.expect('op', ')', ["')'"])
            return inner
        raise DslSyntaxError(f'unexpected {token.describe()}', token.offset, _EXPR_START)

def parse(tokens) -> RewardProgram:
    """ Build a RewardProgram from the token list produced by `tokenize` """
    return _Parser(tokens).program()

# ---------------------------------------------------------------------------
# Validation

_NUM = 'number'
_BOOL = 'boolean'

class _Validator:

    def __init__(self, names):
        self.names = set(names)
        self.diagnostics = []

    def report(self, node, code, message):
        self.diagnostics.append(Diagnostic(node.offset, code, message))

    def numeric(self, node, what):
        kind = self.check(node)
        if kind == _BOOL:
            self.report(node, 'type', f'boolean expression used as {what}')

    def condition(self, node, what):
        kind = self.check(node)
        if kind == _NUM:
            self.report(node, 'type', f'numeric expression used as {what}; use a comparison')

    def check(self, node):
        if isinstance(node, Number):
            return _NUM
        elif isinstance(node, Name):
            if node.name not in self.names:
                self.report(node, 'unknown-identifier', f'unknown identifier "{node.name}"')
                return None
            return _NUM
        elif isinstance(node, Neg):
            self.numeric(node.operand, 'an operand of unary -')
            return _NUM
        elif isinstance(node, Binary):
            self.numeric(node.left, f"the left operand of '{node.op}'")
            self.numeric(node.right, f"the right operand of '{node.op}'")
            return _NUM
        elif isinstance(node, Compare):
            self.numeric(node.left, f"the left operand of '{node.op}'")
            self.numeric(node.right, f"the right operand of '{node.op}'")
            return _BOOL
        elif isinstance(node, BoolOp):
            self.condition(node.left, f"the left operand of '{node.op}'")
            self.condition(node.right, f"the right operand of '{node.op}'")
            return _BOOL
        elif isinstance(node, Not):
            self.condition(node.operand, "the operand of 'not'")
            return _BOOL
        elif isinstance(node, If):
            self.condition(node.cond, 'the condition of if')
            self.numeric(node.then, 'the then-branch of if')
            self.numeric(node.otherwise, 'the else-branch of if')
            return _NUM
        elif isinstance(node, Call):
            arity = BUILTINS.get(node.func)
            if arity is None:
                self.report(node, 'unknown-function',
                            f'unknown function "{node.func}" (available: {", ".join(sorted(BUILTINS))})')
            elif len(node.args) != arity:
                self.report(node, 'arity', f'{node.func} takes {arity} argument(s), {len(node.args)} given')
            for arg in node.args:
                self.numeric(arg, f'an argument of {node.func}')
            return _NUM
        raise DslError(f'not a reward expression node: {node!r}')

    def check_depth(self, node, what):
        d = depth(node)
        if d > MAX_DEPTH:
            self.report(node, 'depth', f'{what} is nested {d} levels deep; the limit is {MAX_DEPTH}')
            return False
        return True

def validate(program: RewardProgram, context_schema=CONTEXT_NAMES) -> typing.List[Diagnostic]:
    """ Check names, types and depth of `program`; an empty list means it is valid """
    validator = _Validator(context_schema)
    for (name, value) in program.bindings:
        if validator.check_depth(value, f'binding "{name}"'):
            validator.numeric(value, f'the value of binding "{name}"')
        if name in validator.names:
            validator.report(value, 'duplicate-binding',
                             f'"{name}" is already a context variable or an earlier binding')
        validator.names.add(name)
    if validator.check_depth(program.result, 'the reward expression'):
        validator.numeric(program.result, 'the reward value')
    return validator.diagnostics

def compile_reward(source, context_schema=CONTEXT_NAMES) -> RewardProgram:
    """ Tokenize, parse and validate `source`; raise a DslError on the first failing stage """
    if not isinstance(source, RewardSource):
        source = RewardSource(source)
    program = parse(tokenize(source))
    diagnostics = validate(program, context_schema)
    if diagnostics:
        raise DslValidationError(diagnostics)
    return dataclasses.replace(program, source=source)

# ---------------------------------------------------------------------------
# Evaluation

def _binary(op, a, b, node):
    if op == '+':
        value = a + b
    elif op == '-':
        value = a - b
    elif op == '*':
        value = a * b
    else:
        if b == 0.0:
            raise DslDomainError('division by zero', node.offset, pretty_expr(node))
        value = a / b
    return _finite(value, node)

def _finite(value, node):
    if not math.isfinite(value):
        raise DslDomainError('result is not finite', node.offset, pretty_expr(node))
    return value

def _call(node, args):
    func = node.func
    try:
        if func == 'abs':
            return abs(args[0])
        elif func == 'exp':
            return _finite(math.exp(args[0]), node)
        elif func == 'log':
            if args[0] <= 0.0:
                raise DslDomainError(f'log of non-positive value {args[0]:g}', node.offset, pretty_expr(node))
            return math.log(args[0])
        elif func == 'sqrt':
            if args[0] < 0.0:
                raise DslDomainError(f'sqrt of negative value {args[0]:g}', node.offset, pretty_expr(node))
            return math.sqrt(args[0])
        elif func == 'tanh':
            return math.tanh(args[0])
        elif func == 'min':
            return min(args[0], args[1])
        elif func == 'max':
            return max(args[0], args[1])
        elif func == 'pow':
            return _finite(math.pow(args[0], args[1]), node)
        elif func == 'clamp':
            if args[1] > args[2]:
                raise DslDomainError(f'clamp bounds are reversed ({args[1]:g} > {args[2]:g})',
                                     node.offset, pretty_expr(node))
            return min(max(args[0], args[1]), args[2])
    except (OverflowError, ValueError, ZeroDivisionError) as err:
        raise DslDomainError(f'{func} failed ({err})', node.offset, pretty_expr(node))
    raise DslError(f'unknown function "{func}"', node.offset)

def _eval(node, env):
    if isinstance(node, Number):
        return node.value
    elif isinstance(node, Name):
        return env[node.name]
    elif isinstance(node, Neg):
        return -_eval(node.operand, env)
    elif isinstance(node, Binary):
        return _binary(node.op, _eval(node.left, env), _eval(node.right, env), node)
    elif isinstance(node, Compare):
        a = _eval(node.left, env)
        b = _eval(node.right, env)
        op = node.op
        if op == '<':
            return a < b
        elif op == '<=':
            return a <= b
        elif op == '>':
            return a > b
        elif op == '>=':
            return a >= b
        return a == b
    elif isinstance(node, BoolOp):
        if node.op == 'and':
            return _eval(node.left, env) and _eval(node.right, env)
        return _eval(node.left, env) or _eval(node.right, env)
    elif isinstance(node, Not):
        return not _eval(node.operand, env)
    elif isinstance(node, If):
        if _eval(node.cond, env):
            return _eval(node.then, env)
        return _eval(node.otherwise, env)
    elif isinstance(node, Call):
        return _call(node, [_eval(a, env) for a in node.args])
    raise DslError(f'not a reward expression node: {node!r}')

def evaluate(program: RewardProgram, ctx) -> float:
    """ The reward of `program` under `ctx`, clamped to [-REWARD_LIMIT, REWARD_LIMIT]

    `ctx` is an EvalContext or a mapping of context names to numbers. Leaving
    the domain of an operation raises DslDomainError naming the subexpression.
    """
    values = ctx.as_dict() if isinstance(ctx, EvalContext) else dict(ctx)
    env = {}
    for name in CONTEXT_NAMES:
        if name not in values:
            raise DslError(f'context variable "{name}" is missing')
        env[name] = float(values[name])
    for (name, value) in program.bindings:
        env[name] = float(_eval(value, env))
    result = float(_eval(program.result, env))
    return min(max(result, -REWARD_LIMIT), REWARD_LIMIT)

# ---------------------------------------------------------------------------
# Canonical printing

def _number_text(value):
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)

def _format(node, top):
    if isinstance(node, Number):
        return _number_text(node.value)
    elif isinstance(node, Name):
        return node.name
    elif isinstance(node, Neg):
        return '-' + _format(node.operand, False)
    elif isinstance(node, Not):
        text = 'not ' + _format(node.operand, False)
    elif isinstance(node, (Binary, Compare, BoolOp)):
        text = f'{_format(node.left, False)} {node.op} {_format(node.right, False)}'
    elif isinstance(node, If):
        return (f'if({_format(node.cond, True)}, {_format(node.then, True)}, '
                f'{_format(node.otherwise, True)})')
    elif isinstance(node, Call):
        return f'{node.func}(' + ', '.join(_format(a, True) for a in node.args) + ')'
    else:
        raise DslError(f'not a reward expression node: {node!r}')
    return text if top else f'({text})'

def pretty_expr(node):
    return _format(node, True)

def pretty_print(program: RewardProgram) -> str:
    """ Canonical source of `program`: one binding per line, every nested operator parenthesized """
    lines = [f'let {name} = {_format(value, True)};' for (name, value) in program.bindings]
    lines.append(_format(program.result, True))
    return '\n'.join(lines)

# ---------------------------------------------------------------------------
# Built-in programs and loading

BUILTIN_REWARDS = {
    'zero': '0',
    'goal': '-goal_dist + 100 * reached_goal',
    'full': """\
# hard tasks: avoid obstacles, keep the formation, reach the destination
let progress = -0.1 * goal_dist;
let shape = -2 * formation_error;
let clearance = if(min_obstacle_dist < 0.7, -5 * (0.7 - min_obstacle_dist), 0);
let approach = if(min_obstacle_dist < 1.5, -0.2 * max(nearest_obstacle_closing_speed, 0), 0);
# soft tasks: smooth motion, short missions
let smooth = -0.01 * accel;
progress + shape + clearance + approach + smooth - 0.01 + 100 * reached_goal - 100 * collision
""",
}

def load_reward_source(spec: str) -> RewardSource:
    """ `builtin:<name>` or the path of a .rdsl file """
    if spec.startswith('builtin:'):
        name = spec[len('builtin:'):]
        if name not in BUILTIN_REWARDS:
            raise DslError(f'unknown builtin reward "{name}", expected one of {sorted(BUILTIN_REWARDS)}')
        return RewardSource(BUILTIN_REWARDS[name], 'builtin')
    if os.path.isdir(spec):
        raise IsADirectoryError(spec)
    with open(spec, 'rb') as f:
        data = f.read()
    try:
        text = data.decode('utf-8')
    except UnicodeDecodeError as err:
        raise DslLexError(f'invalid UTF-8 byte 0x{data[err.start]:02x}', err.start)
    return RewardSource(text, 'file')
