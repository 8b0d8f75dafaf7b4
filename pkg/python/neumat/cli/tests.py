import contextlib
import io
import os
import re
import tempfile
import textwrap

import numpy as np
from expecttest import TestCase
from PIL import Image as PILImage

from ..datagen import read_dataset_header
from ..material import MbtfMaterial, load_material, save_material
from ..prelude import *
from ..renderer import read_pfm
from ..command import parse_argv
from .cli import build_group, inspect_report, main

CONFIGS = pathlib.Path(__file__).resolve().parents[3] / "configs"

SCENE = """\
camera.position = 0.5 0.5 2
camera.look_at = 0.5 0.5 0
camera.up = 0 1 0
camera.width = 8
camera.height = 8
material = m.neumat
"""


def run(*args: str) -> str:
    out = io.StringIO()
    with contextlib.redirect_stdout(out):
        main(["neumat", *args])
    return out.getvalue()


class Test(TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = self._tmp.name

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def path(self, name: str) -> str:
        return os.path.join(self.dir, name)

    def run_fails(self, *args: str) -> Tuple[int, str]:
        err = io.StringIO()
        with contextlib.redirect_stderr(err), contextlib.redirect_stdout(io.StringIO()):
            with self.assertRaises(SystemExit) as cm:
                main(["neumat", *args])
        code = cm.exception.code
        assert isinstance(code, int)
        return code, err.getvalue()

    def generate(self, name: str = "d.mbtfq", *extra: str) -> str:
        out = self.path(name)
        run(
            "generate",
            "--preset",
            "flat",
            "--k",
            "1",
            "--per-texel",
            "16",
            "--samples",
            "2",
            "--seed",
            "1",
            "--force",
            "-o",
            out,
            *extra,
        )
        return out

    def train_small(self, dataset: str, out: str, iters: int) -> str:
        return run(
            "train",
            dataset,
            "-o",
            out,
            "--iters",
            str(iters),
            "--batch-size",
            "16",
            "--channels",
            "3",
            "--offset-channels",
            "3",
        )

    def test_generate(self):
        out = run(
            "generate",
            "--preset",
            "flat",
            "--k",
            "1",
            "--per-texel",
            "16",
            "--samples",
            "2",
            "--seed",
            "1",
            "--force",
            "-o",
            self.path("a.mbtfq"),
        )
        self.assertIn("wrote 64 records", out)
        self.assertEqual(64, read_dataset_header(self.path("a.mbtfq")).count)
        self.assertEqual(1, read_dataset_header(self.path("a.mbtfq")).k)

    def test_generate_is_deterministic(self):
        a = self.generate("a.mbtfq")
        b = self.generate("b.mbtfq", "--threads", "3")
        self.assertEqual(sha256_file(a), sha256_file(b))

    def test_generate_per_texel_warning(self):
        args = ["--preset", "flat", "--k", "0", "--per-texel", "64", "--samples", "1"]
        with self.assertLogs(LOG, level="WARNING") as logs:
            run("generate", *args, "-o", self.path("a.mbtfq"))
        self.assertIn("recommended range 200-400", "\n".join(logs.output))

        with self.assertNoLogs(LOG, level="WARNING"):
            run("generate", *args, "--force", "-o", self.path("b.mbtfq"))

    def test_generate_from_png(self):
        heights = (np.arange(16).reshape(4, 4) * 4000).astype(np.uint16)
        PILImage.fromarray(heights).save(self.path("h.png"))
        albedo = np.full((4, 4, 3), 128, dtype=np.uint8)
        PILImage.fromarray(albedo).save(self.path("a.png"))

        out = run(
            "generate",
            "--heightfield",
            self.path("h.png"),
            "--albedo",
            self.path("a.png"),
            "--k",
            "0",
            "--per-texel",
            "8",
            "--samples",
            "1",
            "--force",
            "-o",
            self.path("png.mbtfq"),
        )
        self.assertIn("wrote 8 records", out)

    def test_generate_errors(self):
        code, err = self.run_fails("generate", "-o", self.path("a.mbtfq"))
        self.assertEqual(2, code)
        self.assertIn("one of --preset or --heightfield is required", err)

        code, err = self.run_fails(
            "generate", "--heightfield", self.path("nope.png"), "-o", self.path("a")
        )
        self.assertEqual(2, code)
        self.assertIn("heightfield not found", err)

        code, err = self.run_fails(
            "generate", "--preset", "marble", "-o", self.path("a.mbtfq")
        )
        self.assertEqual(2, code)
        self.assertIn("unknown preset: marble", err)

    def test_train_zero_iterations(self):
        dataset = self.generate()
        self.train_small(dataset, self.path("m.neumat"), 0)

        mat = load_material(self.path("m.neumat"))
        self.assertEqual(1, mat.k)
        self.assertEqual(3, mat.channels)
        self.assertTrue(mat.has_offset)
        self.assertEqual(0, mat.provenance.iterations)
        self.assertEqual(sha256_file(dataset), mat.provenance.dataset_sha256)

    def test_train_baseline(self):
        dataset = self.generate()
        run("train", dataset, "-o", self.path("b.neumat"), "--iters", "0", "--baseline")
        self.assertFalse(load_material(self.path("b.neumat")).has_offset)

    def test_train_and_eval_agree(self):
        dataset = self.generate()
        train_out = self.train_small(dataset, self.path("m.neumat"), 3)
        eval_out = run(
            "eval", self.path("m.neumat"), dataset, "--csv", self.path("e.csv")
        )

        trained = re.search(r"final dataset MSE: (\S+)", train_out)
        evaluated = re.search(r"^dataset MSE: (\S+)", eval_out, re.MULTILINE)
        assert trained is not None and evaluated is not None
        self.assertEqual(trained.group(1), evaluated.group(1))
        self.assertRegex(eval_out, r"max relative error: \S+")

        with open(self.path("e.csv")) as f:
            lines = f.read().splitlines()
        self.assertEqual("level,sigma,mse", lines[0])
        self.assertEqual(["0", "1"], [line.split(",")[0] for line in lines[1:]])

    def test_eval_levels_and_swatches(self):
        dataset = self.generate()
        self.train_small(dataset, self.path("m.neumat"), 0)
        out = run(
            "eval",
            self.path("m.neumat"),
            dataset,
            "--levels",
            "1",
            "--preset",
            "flat",
            "--swatch-resolution",
            "4",
            "--samples",
            "2",
            "--csv",
            self.path("e.csv"),
        )
        self.assertIn("per-level swatch image MSE", out)
        with open(self.path("e.csv")) as f:
            lines = f.read().splitlines()
        self.assertEqual(2, len(lines))
        self.assertTrue(lines[1].startswith("1,0.5,"))

    def test_eval_depth_mismatch(self):
        dataset = self.generate()
        save_material(MbtfMaterial.zeros(2, 3, 3), self.path("k2.neumat"))
        code, err = self.run_fails("eval", self.path("k2.neumat"), dataset)
        self.assertEqual(2, code)
        self.assertIn("different pyramid depths", err)

    def test_config_file(self):
        dataset = self.generate()
        with open(self.path("train.cfg"), "w") as f:
            f.write(
                textwrap.dedent(
                    """\
                    # tiny run
                    iters = 2
                    batch-size = 8
                    channels = 3
                    offset_channels = 3
                    log = {log}
                    """
                ).format(log=self.path("loss.tsv"))
            )
        cfg = self.path("train.cfg")
        run("train", dataset, "-o", self.path("m.neumat"), "--config", cfg)

        self.assertEqual(2, load_material(self.path("m.neumat")).provenance.iterations)
        with open(self.path("loss.tsv")) as f:
            self.assertEqual(2, len(f.read().splitlines()))

        with open(self.path("bad.cfg"), "w") as f:
            f.write("iters = 2\nepochs = 3\n")
        code, err = self.run_fails(
            "train", dataset, "-o", self.path("m2"), "--config", self.path("bad.cfg")
        )
        self.assertEqual(2, code)
        self.assertIn("unknown config key: epochs", err)

    def test_reproduction_configs(self):
        def parsed(config: str, *argv: str) -> StrDict:
            path = str(CONFIGS / config)
            return parse_argv(build_group(), ["neumat", *argv, "--config", path]).kwargs

        flat = parsed("flat-generate.cfg", "generate", "-o", "x")
        self.assertEqual(("flat", 4), (flat["preset"], flat["k"]))

        train = parsed("flat-train.cfg", "train", "d", "-o", "x")
        self.assertEqual(3000, train["iterations"])
        self.assertEqual(2**14, train["batch_size"])
        self.assertEqual((7, 7), (train["channels"], train["offset_channels"]))

        step = parsed("step-generate.cfg", "generate", "-o", "x")
        self.assertEqual(("step", 6), (step["preset"], step["k"]))

        full = parsed("step-train.cfg", "train", "d", "-o", "x")
        baseline = parsed("step-train.cfg", "train", "d", "--baseline", "-o", "x")
        self.assertFalse(full.pop("baseline"))
        self.assertTrue(baseline.pop("baseline"))
        self.assertEqual(full, baseline)

        lod = parsed("step-eval.cfg", "eval", "m", "d")
        self.assertEqual("step", lod["preset"])

    def test_inspect_report(self):
        self.assertExpectedInline(
            inspect_report(MbtfMaterial.zeros(1, 7, 7)),
            """\
k: 1
channels: 7
offset channels: 7
iterations: 0
dataset sha256: unknown
parameters: decoder=1678, offset=1576, pyramid texels=35, offset texels=28

level   resolution  mean  std  min  max
0       1           0     0    0    0
1       2           0     0    0    0
offset  2           0     0    0    0
""",
        )

    def test_inspect_offset_vis(self):
        save_material(MbtfMaterial.zeros(2, 3, 3), self.path("m.neumat"))
        out = run(
            "inspect",
            self.path("m.neumat"),
            "--offset-vis",
            "0,0",
            "0.5,0",
            "--out-dir",
            self.dir,
        )
        self.assertIn("offset channels: 3", out)

        with PILImage.open(self.path("offset_0_0.png")) as im:
            pixels = np.array(im)
        self.assertEqual((4, 4, 3), pixels.shape)
        self.assertTrue(np.all(pixels == [128, 128, 0]))
        self.assertTrue(os.path.exists(self.path("offset_0.5_0.png")))

        save_material(
            MbtfMaterial.zeros(1, 3, 3, with_offset=False), self.path("b.neumat")
        )
        code, err = self.run_fails(
            "inspect", self.path("b.neumat"), "--offset-vis", "0,0"
        )
        self.assertEqual(2, code)
        self.assertIn("material has no offset module", err)

    def test_inspect_corrupt_file(self):
        with open(self.path("junk.neumat"), "wb") as f:
            f.write(b"not a material")
        code, _ = self.run_fails("inspect", self.path("junk.neumat"))
        self.assertEqual(2, code)

    def write_scene(self) -> str:
        save_material(MbtfMaterial.zeros(1, 3, 3), self.path("m.neumat"))
        with open(self.path("scene.txt"), "w") as f:
            f.write(SCENE)
        return self.path("scene.txt")

    def test_render(self):
        scene = self.write_scene()
        run("render", scene, "-o", self.path("r.pfm"))
        self.assertEqual((8, 8, 3), read_pfm(self.path("r.pfm")).data.shape)

    def test_render_lod_sweep(self):
        scene = self.write_scene()
        out = run("render", scene, "-o", self.path("r.png"), "--lod-sweep", "3")
        self.assertEqual(3, out.count("wrote"))
        for i in range(3):
            self.assertTrue(os.path.exists(self.path(f"r_lod{i}.png")))

    def test_render_reference(self):
        scene = self.write_scene()
        out = run(
            "render",
            scene,
            "-o",
            self.path("r.pfm"),
            "--reference",
            "--preset",
            "flat",
            "--resolution",
            "8",
            "--samples",
            "2",
        )
        self.assertIn("image MSE:", out)
        self.assertTrue(os.path.exists(self.path("r_ref.pfm")))

    def test_render_missing_material(self):
        scene = self.write_scene()
        os.remove(self.path("m.neumat"))
        code, err = self.run_fails("render", scene, "-o", self.path("r.pfm"))
        self.assertEqual(2, code)
        self.assertIn("material not found", err)

    def test_unknown_flag_and_help(self):
        code, err = self.run_fails("train", "d.mbtfq", "-o", "m", "--epochs", "3")
        self.assertEqual(2, code)
        self.assertIn("unknown flag: --epochs", err)

        out = run("--help")
        for name in ["generate", "train", "render", "eval", "inspect"]:
            self.assertIn(name, out)

        out = run("train", "--help")
        for flag in ["--iters", "--baseline", "--config", "--threads", "--resume"]:
            self.assertIn(flag, out)
