import io
import re
import tempfile
from pathlib import Path

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, override_settings
from PIL import Image

from apps.core.checkpoint import MAGIC, decode, encode, load_network, read_checkpoint, save_checkpoint, snapshot
from apps.core.config import merge_overrides, parse_config_text
from apps.core.exceptions import CheckpointError, ConfigError, InputError
from apps.core.forms import CorpusConfigForm, ModelConfigForm, TrainConfigForm, build_configs
from apps.core.io import atomic_write, read_table, read_wav, write_pgm, write_wav
from apps.core.seeding import derive_seed, spawn_seeds
from apps.dsp.signals import Waveform
from apps.separator.config import ModelConfig
from apps.separator.network import IQueryNet
from apps.synthdata.config import CorpusConfig
from apps.synthdata.corpus import gen_corpus
from apps.synthdata.sampler import MixSampler
from apps.tensorcore.optim import Adam

TINY_MODEL = dict(n_queries=3, channels=16, embed_dim=4, heads=2, unet_depth=3, base_channels=2,
                  mask_hidden=16, ffn_mult=2)
TINY_CONFIG = (Path(__file__).resolve().parent / 'fixtures' / 'tiny.conf').read_text(encoding='utf-8')


class ConfigParsingTests(SimpleTestCase):
    def test_comments_and_blank_lines(self):
        entries = parse_config_text('# header\n\nepochs = 40\n  seed=3  \n')
        self.assertEqual(entries, {'epochs': ('40', 3), 'seed': ('3', 4)})

    def test_missing_equals_names_line(self):
        with self.assertRaises(ConfigError) as ctx:
            parse_config_text('epochs=4\nbatch 4\n')
        self.assertEqual(ctx.exception.line, 2)
        self.assertEqual(ctx.exception.exit_code, 2)

    def test_duplicate_key(self):
        with self.assertRaisesMessage(ConfigError, 'line 3'):
            parse_config_text('seed=1\nepochs=2\nseed=4\n')

    def test_overrides_win(self):
        merged = merge_overrides({'seed': ('1', 1), 'epochs': ('2', 2)}, seed=9, epochs=None)
        self.assertEqual(merged['seed'], ('9', None))
        self.assertEqual(merged['epochs'], ('2', 2))


class ConfigFormTests(SimpleTestCase):
    def test_lists_and_flags(self):
        config = TrainConfigForm(parse_config_text(
            'epochs=40\nlr_transformer_milestones=30\nlr_other_milestones=15,25\ncontrastive=True\n'
            'exclude_classes=7\n')).build()
        self.assertEqual(config.lr_other_milestones, (15, 25))
        self.assertEqual(config.exclude_classes, (7,))
        self.assertTrue(config.contrastive)

    def test_split_fractions(self):
        config = CorpusConfigForm(parse_config_text('split_fractions=0.6,0.2,0.2\n')).build()
        self.assertEqual(config.split_fractions, (0.6, 0.2, 0.2))

    def test_unknown_key_names_line(self):
        with self.assertRaises(ConfigError) as ctx:
            ModelConfigForm(parse_config_text('channels=16\n\nwidth=3\n')).build()
        self.assertEqual(ctx.exception.line, 3)
        self.assertIn("'width'", str(ctx.exception))

    def test_uncastable_value(self):
        with self.assertRaises(ConfigError) as ctx:
            TrainConfigForm(parse_config_text('seed=1\nepochs=many\n')).build()
        self.assertEqual(ctx.exception.line, 2)

    def test_invariant_violation_names_line(self):
        with self.assertRaises(ConfigError) as ctx:
            TrainConfigForm(parse_config_text('seed=1\nbatch=2\ntemperature=0\n')).build()
        self.assertEqual(ctx.exception.line, 3)

    def test_unknown_layout(self):
        with self.assertRaises(ConfigError):
            ModelConfigForm(parse_config_text('layout=sideways\n')).build()

    def test_one_file_for_every_config(self):
        corpus, model, train = build_configs(parse_config_text(TINY_CONFIG),
                                             CorpusConfigForm, ModelConfigForm, TrainConfigForm)
        self.assertEqual((corpus.n_classes, model.channels, train.epochs), (3, 16, 1))
        self.assertEqual((corpus.seed, train.seed), (11, 11))

    def test_text_round_trip(self):
        model = ModelConfig(**TINY_MODEL)
        self.assertEqual(ModelConfigForm(parse_config_text(model.to_text())).build(), model)


class SeedingTests(SimpleTestCase):
    def test_stable_and_distinct(self):
        self.assertEqual(derive_seed(7, 1, 2), derive_seed(7, 1, 2))
        self.assertNotEqual(derive_seed(7, 1, 2), derive_seed(7, 2, 1))
        self.assertEqual(spawn_seeds(3, 5), spawn_seeds(3, 5))
        self.assertEqual(len(set(spawn_seeds(3, 50))), 50)


class IoTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_wav_round_trip(self):
        samples = np.sin(np.linspace(0, 40, 2000)) * 0.5
        write_wav(self.tmp / 'a.wav', Waveform(samples, 11025))
        back = read_wav(self.tmp / 'a.wav', expected_rate=11025)
        self.assertLessEqual(np.max(np.abs(back.samples - samples)), 1 / 32768)

    def test_wav_rate_and_missing_file(self):
        write_wav(self.tmp / 'a.wav', Waveform(np.zeros(100), 8000))
        with self.assertRaises(InputError):
            read_wav(self.tmp / 'a.wav', expected_rate=11025)
        with self.assertRaises(InputError):
            read_wav(self.tmp / 'missing.wav')

    def test_pgm_bytes(self):
        values = np.random.default_rng(0).uniform(0, 1, (8, 5))
        write_pgm(self.tmp / 'm.pgm', values)
        raw = (self.tmp / 'm.pgm').read_bytes()
        self.assertTrue(raw.startswith(b'P5'))
        pixels = np.asarray(Image.open(self.tmp / 'm.pgm'))
        np.testing.assert_array_equal(pixels, np.round(np.flipud(values) * 255).astype(np.uint8))

    def test_atomic_write_leaves_nothing_on_failure(self):
        with self.assertRaises(RuntimeError):
            with atomic_write(self.tmp / 'out.txt') as handle:
                handle.write('partial')
                raise RuntimeError('boom')
        self.assertEqual(list(self.tmp.iterdir()), [])


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        self.net = IQueryNet(ModelConfig(**TINY_MODEL), seed=4)

    def tearDown(self):
        self._tmp.cleanup()

    def test_round_trip_is_bit_exact(self):
        save_checkpoint(self.tmp / 'a.iqry', self.net, extra={'epoch': 3})
        net, checkpoint = load_network(self.tmp / 'a.iqry')
        self.assertEqual(checkpoint.extra, {'epoch': 3})
        self.assertEqual(net.config, self.net.config)
        for (name, a), (_, b) in zip(self.net.state_dict().items(), net.state_dict().items()):
            self.assertTrue(np.array_equal(a, b), name)

    def test_prompts_and_trainable_flags_survive(self):
        self.net.enter_finetune()
        self.net.add_audio_prompt([5], seed=1)
        save_checkpoint(self.tmp / 'p.iqry', self.net)
        net, _ = load_network(self.tmp / 'p.iqry')
        self.assertEqual(net.queries.query_map()[5], 3)
        self.assertTrue(net.finetuning)
        self.assertEqual({n: p.trainable for n, p in net.named_parameters()},
                         {n: p.trainable for n, p in self.net.named_parameters()})
        np.testing.assert_array_equal(net.queries.weight.data, self.net.queries.weight.data)

    def test_optimizer_state(self):
        opt = Adam(self.net.parameters(), lr=1e-3)
        for p in self.net.parameters():
            p.grad = np.ones_like(p.data)
        opt.step()
        checkpoint = decode(encode(snapshot(self.net, optimizers={'other': opt})))
        t, m, v = checkpoint.optimizers['other']['queries.weight']
        self.assertEqual(t, 1)
        np.testing.assert_array_equal(m, opt.state_dict()['queries.weight'][1])

    def test_rejects_corruption(self):
        raw = encode(snapshot(self.net))
        cases = {
            'bad magic': b'XXXX' + raw[4:],
            'version': MAGIC + (99).to_bytes(4, 'little') + raw[8:],
            'truncated': raw[:-9],
            'trailing': raw + b'\0',
        }
        for label, data in cases.items():
            with self.subTest(label), self.assertRaises(CheckpointError):
                decode(data)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            read_checkpoint(self.tmp / 'nope.iqry')


@override_settings(FEATURE_DIM=16)
class CommandTests(SimpleTestCase):
    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls._tmp = tempfile.TemporaryDirectory()
        cls.tmp = Path(cls._tmp.name)
        cls.corpus = gen_corpus(CorpusConfig(n_classes=3, clips_per_class=5, seed=2, seconds=0.5),
                                cls.tmp / 'corpus')
        cls.checkpoint = cls.tmp / 'tiny.iqry'
        save_checkpoint(cls.checkpoint, IQueryNet(ModelConfig(**TINY_MODEL), seed=1))
        cls.config = cls.tmp / 'tiny.conf'
        cls.config.write_text(TINY_CONFIG)

    @classmethod
    def tearDownClass(cls):
        cls._tmp.cleanup()
        super().tearDownClass()

    def call(self, *args):
        out = io.StringIO()
        call_command(*args, stdout=out, stderr=io.StringIO())
        return out.getvalue()

    def test_gen_corpus_is_reproducible(self):
        for name in ('a', 'b'):
            self.call('gen_corpus', '--config', str(self.config), '--seed', '7', '--out', str(self.tmp / name))
        self.assertEqual((self.tmp / 'a' / 'manifest.tsv').read_bytes(), (self.tmp / 'b' / 'manifest.tsv').read_bytes())

    def test_malformed_config_exits_2(self):
        bad = self.tmp / 'bad.conf'
        bad.write_text('n_classes=3\nthis line is wrong\n')
        with self.assertRaises(CommandError) as ctx:
            self.call('gen_corpus', '--config', str(bad), '--out', str(self.tmp / 'never'))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('line 2', str(ctx.exception))
        self.assertFalse((self.tmp / 'never').exists())

    def test_missing_checkpoint_exits_1(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('inspect', '--checkpoint', str(self.tmp / 'missing.iqry'), '--corpus', str(self.tmp / 'corpus'))
        self.assertEqual(ctx.exception.returncode, 1)

    def test_separate_writes_three_files_per_source(self):
        sample = MixSampler(self.corpus, 'test', k=2).sample(0)
        write_wav(self.tmp / 'mix.wav', sample.mixture)
        out = self.tmp / 'separated'
        self.call('separate', '--checkpoint', str(self.checkpoint), '--mix', str(self.tmp / 'mix.wav'),
                  '--object-class', str(sample.class_ids[0]), '--object-class', str(sample.class_ids[1]),
                  '--corpus', str(self.tmp / 'corpus'), '--out', str(out))
        self.assertEqual(sorted(p.name for p in out.iterdir()), [
            'mask_0.csv', 'mask_0.pgm', 'mask_1.csv', 'mask_1.pgm', 'source_0.wav', 'source_1.wav',
        ])
        rows = read_table(out / 'mask_0.csv', delimiter=',')
        csv_values = np.array([[float(row[f't{t}']) for t in range(len(row) - 1)] for row in rows])
        pixels = np.asarray(Image.open(out / 'mask_0.pgm'))
        np.testing.assert_array_equal(np.round(np.flipud(csv_values) * 255).astype(np.uint8), pixels)

    def test_separate_activity_count_must_match(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('separate', '--checkpoint', str(self.checkpoint), '--mix', str(self.tmp / 'none.wav'),
                      '--object-class', '0', '--object-class', '1', '--activity', 'x.meta',
                      '--corpus', str(self.tmp / 'corpus'), '--out', str(self.tmp / 'sep2'))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_evaluate_references_only(self):
        out = self.tmp / 'evaluate'
        self.call('evaluate', '--corpus', str(self.tmp / 'corpus'), '--mixtures', '1', '--variants',
                  'mixture,oracle', '--seed', '4', '--out', str(out))
        rows = read_table(out / 'evaluation.tsv')
        self.assertEqual(sorted(r['variant'] for r in rows), ['mixture', 'mixture', 'oracle', 'oracle'])

    def test_evaluate_unknown_variant(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('evaluate', '--corpus', str(self.tmp / 'corpus'), '--variants', 'best')
        self.assertEqual(ctx.exception.returncode, 2)

    def test_train_then_inspect(self):
        out = self.tmp / 'run'
        self.call('train', '--config', str(self.config), '--corpus', str(self.tmp / 'corpus'), '--out', str(out))
        for name in ('best.iqry', 'last.iqry', 'metrics.tsv', 'run.conf'):
            self.assertTrue((out / name).is_file(), name)
        self.call('inspect', '--checkpoint', str(out / 'best.iqry'), '--corpus', str(self.tmp / 'corpus'),
                  '--mixtures', '2', '--out', str(out / 'inspect'))
        self.assertEqual(len(read_table(out / 'inspect' / 'query_pca.csv', delimiter=',')), 4)
        self.assertTrue((out / 'inspect' / 'mask_energy.tsv').is_file())

    def test_every_command_accepts_a_config(self):
        bad = self.tmp / 'unknown_key.conf'
        bad.write_text('epochs = 1\nwarp_factor = 9\n')
        with self.assertRaises(CommandError) as ctx:
            self.call('evaluate', '--config', str(bad), '--corpus', str(self.tmp / 'corpus'), '--mixtures', '1',
                      '--variants', 'mixture', '--out', str(self.tmp / 'eval_bad'))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('line 2', str(ctx.exception))
        out = self.tmp / 'eval_config'
        self.call('evaluate', '--config', str(self.config), '--corpus', str(self.tmp / 'corpus'), '--mixtures', '1',
                  '--variants', 'mixture', '--out', str(out))
        self.assertTrue((out / 'evaluation.tsv').is_file())

    def _pipeline(self, name):
        root = self.tmp / 'pipeline' / name
        config = str(self.config)
        self.call('gen_corpus', '--config', config, '--out', str(root / 'corpus'))
        self.call('train', '--config', config, '--corpus', str(root / 'corpus'), '--out', str(root / 'run'))
        self.call('evaluate', '--config', config, '--checkpoint', str(root / 'run' / 'best.iqry'),
                  '--corpus', str(root / 'corpus'), '--mixtures', '2', '--out', str(root / 'evaluate'))
        return root

    def test_pipeline_reproduces_recorded_report(self):
        first, second = self._pipeline('first'), self._pipeline('second')
        recorded = first / 'evaluate' / 'evaluation.tsv'
        self.assertEqual(recorded.read_bytes(), (second / 'evaluate' / 'evaluation.tsv').read_bytes())

        def evaluate_against(expected):
            return self.call('evaluate', '--config', str(self.config), '--checkpoint',
                             str(second / 'run' / 'best.iqry'), '--corpus', str(second / 'corpus'),
                             '--mixtures', '2', '--expect', str(expected), '--out', str(second / 'again'))

        self.assertIn('matches', evaluate_against(recorded))

        shifted = self.tmp / 'pipeline' / 'shifted.tsv'
        shifted.write_text(re.sub(r'median_sdr=(-?[\d.]+)', lambda m: f'median_sdr={float(m.group(1)) + 1:.4f}',
                                  recorded.read_text()))
        with self.assertRaises(CommandError) as ctx:
            evaluate_against(shifted)
        self.assertEqual(ctx.exception.returncode, 4)
