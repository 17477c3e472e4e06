// Copyright 2026 The emofuse Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <optional>
#include <string>

#include "emofuse/audio.hpp"
#include "emofuse/checkpoint.hpp"
#include "emofuse/error.hpp"
#include "emofuse/mfcc.hpp"
#include "emofuse/model.hpp"
#include "emofuse/prosody.hpp"
#include "emofuse/ssrl.hpp"
#include "emofuse/train.hpp"

namespace py = pybind11;
using namespace emofuse;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

AudioSegment to_segment(const Array& samples, int sample_rate) {
  if (samples.ndim() != 1) throw ShapeError("samples must be one-dimensional");
  AudioSegment seg;
  seg.samples.assign(samples.data(), samples.data() + samples.size());
  seg.sample_rate = sample_rate;
  return sample_rate == kTargetRate ? seg : resample_16k(seg);
}

Array to_array(const std::vector<double>& v) { return Array(static_cast<py::ssize_t>(v.size()), v.data()); }

Array to_array(const FeatureMatrix& m) {
  Array out({static_cast<py::ssize_t>(m.rows), static_cast<py::ssize_t>(m.cols)});
  std::copy(m.data.begin(), m.data.end(), out.mutable_data());
  return out;
}

// Segment probabilities are averaged, as in evaluation.
std::vector<double> predict_audio(const HumpCat& model, const Array& samples, int sample_rate,
                                  const SsrlEncoder* encoder) {
  std::vector<double> mean(kNumEmotions, 0.0);
  const auto segments = clip_pad_7s(to_segment(samples, sample_rate));
  for (const auto& seg : segments) {
    const auto p = model.predict(extract_features(seg, encoder)).probabilities;
    for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += p[c] / static_cast<double>(segments.size());
  }
  return mean;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Speech emotion recognition: feature extraction and fused-model inference.";

  py::register_exception<Error>(m, "EmofuseError", PyExc_RuntimeError);

  m.attr("SAMPLE_RATE") = kTargetRate;
  m.attr("EMOTIONS") = py::make_tuple("angry", "happy", "neutral", "sad");

  m.def(
      "read_wav",
      [](const std::filesystem::path& path) {
        const AudioSegment seg = read_wav(path);
        return py::make_tuple(to_array(seg.samples), seg.sample_rate);
      },
      py::arg("path"), "Returns (samples, sample_rate) of the first channel.");

  m.def(
      "synth_corpus",
      [](std::size_t n_speakers, std::size_t n_per_class, std::uint64_t seed, const std::string& recipe,
         const std::string& prefix) {
        const auto r = parse_synth_recipe(recipe);
        if (!r) throw ParameterError("unknown recipe '" + recipe + "'");
        py::list out;
        for (const auto& u : synth_corpus(n_speakers, n_per_class, seed, *r, prefix)) {
          py::dict d;
          d["samples"] = to_array(u.audio.samples);
          d["speaker"] = u.record.speaker_id;
          d["emotion"] = std::string(to_string(u.record.label));
          d["path"] = u.record.path.string();
          out.append(d);
        }
        return out;
      },
      py::arg("n_speakers"), py::arg("n_per_class"), py::arg("seed"), py::arg("recipe") = "standard",
      py::arg("prefix") = "spk");

  m.def(
      "mfcc39",
      [](const Array& samples, int sample_rate) { return to_array(extract_mfcc39(to_segment(samples, sample_rate))); },
      py::arg("samples"), py::arg("sample_rate") = kTargetRate, "Frames x 39 (13 cepstra, deltas, delta-deltas).");

  m.def(
      "estimate_f0",
      [](const Array& samples, int sample_rate) {
        const VoicingTrack t = estimate_f0(to_segment(samples, sample_rate));
        return py::make_tuple(to_array(t.f0_hz), std::vector<bool>(t.voiced.begin(), t.voiced.end()));
      },
      py::arg("samples"), py::arg("sample_rate") = kTargetRate, "Returns (f0_hz, voiced) per frame.");

  m.def(
      "prosody",
      [](const Array& samples, int sample_rate) {
        const ProsodyVector p = extract_prosody(to_segment(samples, sample_rate));
        return to_array(std::vector<double>(p.values.begin(), p.values.end()));
      },
      py::arg("samples"), py::arg("sample_rate") = kTargetRate);

  m.def("prosody_labels", [] { return ProsodyVector::dim_labels(); });

  m.def(
      "compute_metrics",
      [](const std::vector<std::size_t>& truth, const std::vector<std::size_t>& predicted, std::size_t n_classes) {
        const Metrics mt = compute_metrics(truth, predicted, n_classes);
        py::dict d;
        d["wa"] = mt.wa;
        d["ua"] = mt.ua;
        return d;
      },
      py::arg("truth"), py::arg("predicted"), py::arg("n_classes") = kNumEmotions);

  py::class_<SsrlEncoder>(m, "Encoder")
      .def_static("load", [](const std::filesystem::path& p) { return SsrlEncoder::load(load_checkpoint(p)); },
                  py::arg("path"));

  py::class_<HumpCat>(m, "Model")
      .def_static("load", py::overload_cast<const std::filesystem::path&>(&HumpCat::load), py::arg("path"))
      .def(
          "predict",
          [](const HumpCat& model, const Array& samples, int sample_rate, const SsrlEncoder* encoder) {
            return predict_audio(model, samples, sample_rate, encoder);
          },
          py::arg("samples"), py::arg("sample_rate") = kTargetRate, py::arg("encoder") = nullptr,
          "Class probabilities in EMOTIONS order.");
}
