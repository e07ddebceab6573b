""" Chat-completion backends for the reward designer

A backend turns a list of chat messages (system + user turns) into the text
of one reply. `http` talks to an OpenAI-compatible endpoint, `replay` serves
archived replies in order, and `record` wraps `http` and archives every
exchange as a transcript that `replay` can consume.
"""

import os
import typing
from dataclasses import dataclass

import openai
import tenacity

import fcca_rewardgen.logging as logging
from fcca_rewardgen.exception import ConfigurationError, RewardGenError
from fcca_rewardgen.files import RecordWriter, read_records

class BackendError(RewardGenError):
    pass

class TransportError(BackendError):
    """ A retryable failure talking to the endpoint (timeout, connection, throttling) """
    pass

class BackendExhaustedError(BackendError):
    """ A replay backend has no responses left """
    pass

BACKEND_KINDS = ('http', 'replay', 'record')

@dataclass
class BackendConfig:
    kind: str = 'replay'
    endpoint: typing.Optional[str] = None
    model: str = ''
    timeout: float = 120.0
    max_retries: int = 3
    temperature: float = 0.7
    token_env: str = 'FCCA_LLM_TOKEN'
    responses: typing.Optional[str] = None
    transcript: typing.Optional[str] = None

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigurationError(f'unknown backend kind "{self.kind}", expected one of {BACKEND_KINDS}')
        if self.timeout <= 0:
            raise ConfigurationError(f'backend timeout must be positive, got {self.timeout}')
        if self.max_retries < 1:
            raise ConfigurationError(f'max_retries must be at least 1, got {self.max_retries}')

    def to_record(self):
        """ The configuration without secrets, as stored in run journals """
        return {'kind': self.kind, 'endpoint': self.endpoint, 'model': self.model,
                'temperature': self.temperature}

class HttpBackend:

    def __init__(self, config: BackendConfig):
        token = os.environ.get(config.token_env)
        if not token:
            raise ConfigurationError(f'the http backend needs an auth token in ${config.token_env}')
        if not config.model:
            raise ConfigurationError('the http backend needs a model name')
        self.config = config
        self.client = openai.OpenAI(api_key=token, base_url=config.endpoint,
                                    timeout=config.timeout, max_retries=0)

    def _request(self, messages):
        try:
            response = self.client.chat.completions.create(model=self.config.model,
                                                           messages=messages,
                                                           temperature=self.config.temperature)
        except (openai.APITimeoutError, openai.APIConnectionError,
                openai.RateLimitError, openai.InternalServerError) as err:
            raise TransportError(f'{type(err).__name__}: {err}', location=self.config.endpoint)
        except openai.APIError as err:
            raise BackendError(f'endpoint rejected the request: {err}', location=self.config.endpoint)
        if not response.choices or response.choices[0].message.content is None:
            raise BackendError('response has no message content', location=self.config.endpoint)
        return response.choices[0].message.content

    def _warn_retry(self, retry_state):
        logging.warn(f'attempt {retry_state.attempt_number} failed: {retry_state.outcome.exception()}',
                     'retrying')

    def complete(self, messages) -> str:
        retrying = tenacity.Retrying(stop=tenacity.stop_after_attempt(self.config.max_retries),
                                     wait=tenacity.wait_exponential(multiplier=1, min=1, max=30),
                                     retry=tenacity.retry_if_exception_type(TransportError),
                                     before_sleep=self._warn_retry,
                                     reraise=True)
        return retrying(self._request, messages)

class ReplayBackend:
    """ Serves archived responses strictly in order

    `source` is a directory (one response per file, ordered by filename) or
    a transcript written by the record backend.
    """

    def __init__(self, source):
        if source is None:
            raise ConfigurationError('the replay backend needs a "responses" directory or transcript')
        self.source = source
        if os.path.isdir(source):
            names = sorted(n for n in os.listdir(source)
                           if not n.startswith('.') and os.path.isfile(os.path.join(source, n)))
            self.responses = []
            for name in names:
                with open(os.path.join(source, name), 'r', encoding='utf-8') as f:
                    self.responses.append(f.read())
        elif os.path.isfile(source):
            self.responses = []
            for number, record in enumerate(read_records(source), start=1):
                if 'response' not in record:
                    raise BackendError('transcript record has no "response"', location=f'{source}:{number}')
                self.responses.append(record['response'])
        else:
            raise FileNotFoundError(source)
        self.position = 0

    @property
    def remaining(self):
        return len(self.responses) - self.position

    def complete(self, messages) -> str:
        if self.position >= len(self.responses):
            raise BackendExhaustedError(f'all {len(self.responses)} archived responses were used',
                                        location=self.source)
        response = self.responses[self.position]
        self.position += 1
        return response

class RecordBackend:
    """ Forwards to another backend and archives each request/response pair """

    def __init__(self, inner, transcript):
        if transcript is None:
            raise ConfigurationError('the record backend needs a "transcript" path')
        self.inner = inner
        self.writer = RecordWriter(transcript)
        self.count = 0

    def complete(self, messages) -> str:
        response = self.inner.complete(messages)
        self.writer.write({'index': self.count, 'request': messages, 'response': response})
        self.count += 1
        return response

    def close(self):
        self.writer.close()

def make_backend(config: BackendConfig):
    if config.kind == 'replay':
        return ReplayBackend(config.responses)
    elif config.kind == 'record':
        return RecordBackend(HttpBackend(config), config.transcript)
    return HttpBackend(config)
