#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "cli.hpp"
#include "ntksel/dynamics_probe.hpp"
#include "ntksel/feature_store.hpp"
#include "ntksel/kernel.hpp"
#include "ntksel/krr.hpp"
#include "ntksel/parallel.hpp"
#include "ntksel/preselect.hpp"
#include "ntksel/projection.hpp"
#include "ntksel/select.hpp"

namespace py = pybind11;
using namespace ntksel;

namespace {

using RowMatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::vector<SampleId> to_ids(const std::vector<std::string>& ids) {
  std::vector<SampleId> out;
  out.reserve(ids.size());
  for (const auto& s : ids) out.push_back(SampleId::parse(s));
  return out;
}

std::vector<std::string> to_strings(const std::vector<SampleId>& ids) {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(id.str());
  return out;
}

std::vector<EmbeddingRecord> embedding_records(const std::vector<std::string>& ids, const RowMatrixF& m) {
  if (static_cast<std::size_t>(m.rows()) != ids.size()) throw Error(ErrorCode::dim_mismatch, "one id per row required");
  std::vector<EmbeddingRecord> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out[i].id = SampleId::parse(ids[i]);
    out[i].vector.assign(m.row(static_cast<Eigen::Index>(i)).data(),
                         m.row(static_cast<Eigen::Index>(i)).data() + m.cols());
  }
  return out;
}

py::dict header_dict(const FeatureFileHeader& h) {
  py::dict d;
  d["kind"] = std::string(to_string(h.kind));
  d["flags"] = h.flags;
  d["dim"] = h.dim;
  d["count"] = h.count;
  d["proj_seed"] = h.proj_seed;
  d["source_param_dim"] = h.source_param_dim;
  d["grad_scale"] = h.grad_scale;
  return d;
}

py::object parse_json(const nlohmann::ordered_json& j) {
  return py::module_::import("json").attr("loads")(j.dump());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "NTK-based data selection engine";
  py::register_exception<Error>(m, "NtkselError", PyExc_ValueError);

  m.def("set_max_threads", &set_max_threads, py::arg("n"));
  m.def("max_threads", &max_threads);

  py::class_<PipelineConfig>(m, "PipelineConfig")
      .def(py::init<>())
      .def_static("for_selection", &PipelineConfig::for_selection, py::arg("n_select"))
      .def_readwrite("n_select", &PipelineConfig::n_select)
      .def_readwrite("preselect_size", &PipelineConfig::preselect_size)
      .def_readwrite("knn_k", &PipelineConfig::knn_k)
      .def_readwrite("proj_dim", &PipelineConfig::proj_dim)
      .def_readwrite("proj_seed", &PipelineConfig::proj_seed)
      .def_readwrite("grad_scale", &PipelineConfig::grad_scale)
      .def_readwrite("normalize_by_seq_len", &PipelineConfig::normalize_by_seq_len)
      .def("validate", [](const PipelineConfig& c) { return validate_config(c); });

  // projection
  m.def("splitmix64", &splitmix64);
  m.def("sign_word", &sign_word, py::arg("seed"), py::arg("row"), py::arg("block"));
  m.def("sign_table", [](std::uint64_t seed, std::uint64_t rows, std::uint64_t cols) {
    const auto t = sign_table(seed, rows, cols);
    py::array_t<int> a({rows, cols});
    std::copy(t.begin(), t.end(), a.mutable_data());
    return a;
  }, py::arg("seed"), py::arg("rows"), py::arg("cols"));
  m.def("project", [](const Eigen::VectorXd& g, std::uint32_t target_dim, std::uint64_t seed, bool jl_scaled) {
    const ProjectionSpec spec{seed, static_cast<std::uint64_t>(g.size()), target_dim,
                              jl_scaled ? ScaleMode::jl_scaled : ScaleMode::raw};
    const auto v = project(spec, {g.data(), static_cast<std::size_t>(g.size())});
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  }, py::arg("g"), py::arg("target_dim"), py::arg("seed") = 0, py::arg("jl_scaled") = false);

  // kernel
  m.def("jf_ntk", [](const Eigen::VectorXd& u, const Eigen::VectorXd& v) {
    return jf_ntk(std::span<const double>(u.data(), static_cast<std::size_t>(u.size())),
                  std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
  });
  m.def("frobenius_cos", &frobenius_cos);

  // feature files
  m.def("read_header", [](const std::string& path) { return header_dict(read_header(path)); });
  m.def("write_embeddings", [](const std::string& path, const std::vector<std::string>& ids, const RowMatrixF& m) {
    const auto recs = embedding_records(ids, m);
    return write_embeddings(path, embedding_header(static_cast<std::uint32_t>(m.cols())), recs);
  }, py::arg("path"), py::arg("ids"), py::arg("vectors"));
  m.def("write_gradients", [](const std::string& path, const std::vector<std::string>& ids,
                              const std::vector<std::uint32_t>& seq_lens, const RowMatrixF& m, std::uint64_t proj_seed,
                              std::uint64_t source_param_dim, double grad_scale, bool normalized, bool projected) {
    if (seq_lens.size() != ids.size()) throw Error(ErrorCode::dim_mismatch, "one seq_len per id required");
    std::vector<FeatureRecord> recs(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      recs[i].id = SampleId::parse(ids[i]);
      recs[i].seq_len = seq_lens[i];
      recs[i].vector.assign(m.row(static_cast<Eigen::Index>(i)).data(),
                            m.row(static_cast<Eigen::Index>(i)).data() + m.cols());
    }
    return write_features(path, gradient_header(static_cast<std::uint32_t>(m.cols()), proj_seed, source_param_dim,
                                                grad_scale, normalized, projected), recs);
  }, py::arg("path"), py::arg("ids"), py::arg("seq_lens"), py::arg("vectors"), py::arg("proj_seed"),
     py::arg("source_param_dim"), py::arg("grad_scale"), py::arg("normalized") = true, py::arg("projected") = true);
  m.def("read_features", [](const std::string& path) {
    const FeatureFileHeader h = read_header(path);
    std::vector<std::string> ids;
    std::vector<std::uint32_t> lens;
    RowMatrixF mat;
    if (h.kind == FeatureKind::embedding) {
      const auto s = read_embedding_set(path);
      mat.resize(static_cast<Eigen::Index>(s.records.size()), h.dim);
      for (std::size_t i = 0; i < s.records.size(); ++i) {
        ids.push_back(s.records[i].id.str());
        lens.push_back(0);
        std::copy(s.records[i].vector.begin(), s.records[i].vector.end(), mat.row(static_cast<Eigen::Index>(i)).data());
      }
    } else if (h.kind == FeatureKind::gradient) {
      const auto s = read_feature_set(path);
      mat.resize(static_cast<Eigen::Index>(s.records.size()), h.dim);
      for (std::size_t i = 0; i < s.records.size(); ++i) {
        ids.push_back(s.records[i].id.str());
        lens.push_back(s.records[i].seq_len);
        std::copy(s.records[i].vector.begin(), s.records[i].vector.end(), mat.row(static_cast<Eigen::Index>(i)).data());
      }
    } else {
      throw Error(ErrorCode::bad_kind, "read_features handles gradient and embedding files");
    }
    return py::make_tuple(header_dict(h), ids, lens, mat);
  });

  // preselect / select
  m.def("knn_relevance", [](const std::vector<std::string>& dids, const RowMatrixF& d,
                            const std::vector<std::string>& cids, const RowMatrixF& c, std::uint64_t k, bool accelerated) {
    const auto dr = embedding_records(dids, d);
    const auto cr = embedding_records(cids, c);
    const RelevanceTable t = accelerated ? accelerated_knn_relevance(dr, cr, k) : knn_relevance(dr, cr, k);
    return py::make_tuple(to_strings(t.cand_ids), t.counts);
  }, py::arg("domain_ids"), py::arg("domain"), py::arg("cand_ids"), py::arg("cand"), py::arg("k"),
     py::arg("accelerated") = true);
  m.def("top_m", [](const std::vector<std::string>& ids, const std::vector<std::uint64_t>& counts, std::uint64_t mm) {
    RelevanceTable t{to_ids(ids), counts};
    return to_strings(top_m(t, mm));
  });
  m.def("utility_scores", [](const Eigen::MatrixXd& values) {
    KernelMatrix km;
    km.values = values;
    for (Eigen::Index j = 0; j < values.cols(); ++j) km.col_ids.push_back({"c", static_cast<std::uint64_t>(j)});
    return utility_scores(km).scores;
  });
  m.def("select_top_n", [](const std::vector<std::string>& ids, const std::vector<double>& scores, std::uint64_t n) {
    const SelectionResult r = select_top_n(UtilityScores{to_ids(ids), scores}, n);
    return py::make_tuple(to_strings(r.selected), r.scores);
  });
  m.def("run_pipeline", [](const PipelineConfig& cfg, const std::string& domain_emb, const std::string& cand_emb,
                           const std::string& domain_grad, const std::string& cand_grad, const std::string& out,
                           const std::string& manifest) {
    PipelineRun run = run_pipeline(cfg, PipelineInputs{domain_emb, cand_emb, domain_grad, cand_grad});
    const std::string digest = write_pipeline_outputs(run, out, manifest);
    py::dict d;
    d["selected"] = to_strings(run.result.selected);
    d["scores"] = run.result.scores;
    d["result_sha256"] = digest;
    d["manifest_sha256"] = run.result.manifest_ref;
    d["timings"] = parse_json(to_json(run.timings));
    return d;
  }, py::arg("config"), py::arg("domain_emb"), py::arg("cand_emb"), py::arg("domain_grad"), py::arg("cand_grad"),
     py::arg("out"), py::arg("manifest"));

  // krr
  m.attr("DEFAULT_LAMBDA_GRID") = std::vector<double>(kDefaultLambdaGrid.begin(), kDefaultLambdaGrid.end());
  m.def("krr_fit", [](const Eigen::MatrixXd& k, const std::vector<int>& labels, double lambda) {
    const KrrModel mdl = krr_fit(k, labels, lambda);
    return py::make_tuple(mdl.alpha, mdl.classes, mdl.residual);
  }, py::arg("k"), py::arg("labels"), py::arg("lam"));
  m.def("krr_fit_predict", [](const Eigen::MatrixXd& k, const std::vector<int>& labels, double lambda,
                              const Eigen::MatrixXd& k_test) {
    return krr_predict(krr_fit(k, labels, lambda), k_test);
  }, py::arg("k"), py::arg("labels"), py::arg("lam"), py::arg("k_test"));
  m.def("lambda_sweep", [](const Eigen::MatrixXd& kt, const std::vector<int>& yt, const Eigen::MatrixXd& kv,
                           const std::vector<int>& yv, std::vector<double> grid) {
    if (grid.empty()) grid.assign(kDefaultLambdaGrid.begin(), kDefaultLambdaGrid.end());
    const SweepResult r = lambda_sweep(kt, yt, kv, yv, grid);
    return py::make_tuple(r.best_lambda, r.best_accuracy);
  }, py::arg("k_train"), py::arg("labels"), py::arg("k_val"), py::arg("val_labels"),
     py::arg("grid") = std::vector<double>{});

  // toy model
  py::class_<ToyNetwork>(m, "ToyNetwork")
      .def_static("random", [](const std::vector<std::size_t>& dims, std::size_t rank, const std::string& act,
                               std::uint64_t seed) {
        ToyConfig cfg;
        cfg.layer_dims = dims;
        cfg.rank = rank;
        cfg.activation = parse_activation(act);
        return ToyNetwork::random(cfg, seed);
      }, py::arg("layer_dims") = std::vector<std::size_t>{8, 128, 128, 3}, py::arg("rank") = 2,
         py::arg("activation") = "tanh", py::arg("seed") = 0)
      .def_property_readonly("adapter_param_count", &ToyNetwork::adapter_param_count)
      .def_property_readonly("base_param_count", &ToyNetwork::base_param_count)
      .def("forward", [](const ToyNetwork& n, const Eigen::VectorXd& x) {
        return forward(n, {x.data(), static_cast<std::size_t>(x.size())});
      })
      .def("summed_output_gradient", [](const ToyNetwork& n, const Eigen::VectorXd& x) {
        return summed_output_gradient(n, {x.data(), static_cast<std::size_t>(x.size())}).flat;
      })
      .def("jacobian", [](const ToyNetwork& n, const Eigen::VectorXd& x) {
        return jacobian(n, {x.data(), static_cast<std::size_t>(x.size())});
      })
      .def("exact_ntk", [](const ToyNetwork& n, const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
        return exact_ntk(n, {x.data(), static_cast<std::size_t>(x.size())}, {y.data(), static_cast<std::size_t>(y.size())});
      });

  // end-to-end drivers
  m.def("run_demo", [](std::uint64_t seed, std::uint64_t n, std::size_t n_domain, std::size_t n_candidates,
                       std::uint32_t proj_dim) {
    cli::DemoOptions o;
    o.synthetic.seed = seed;
    o.synthetic.n_domain = n_domain;
    o.synthetic.n_candidates = n_candidates;
    o.n_select = n;
    o.proj_dim = proj_dim;
    return parse_json(cli::to_json(cli::run_demo(o)));
  }, py::arg("seed") = 0, py::arg("n") = 50, py::arg("n_domain") = 50, py::arg("n_candidates") = 2000,
     py::arg("proj_dim") = 8192);
  m.def("run_probe", [](std::uint64_t seed, std::size_t steps, double lr, std::size_t checkpoint_every) {
    cli::ProbeOptions o;
    o.seed = seed;
    o.steps = steps;
    o.lr = lr;
    o.checkpoint_every = checkpoint_every;
    return parse_json(cli::to_json(cli::run_probe(o)));
  }, py::arg("seed") = 0, py::arg("steps") = 200, py::arg("lr") = 0.05, py::arg("checkpoint_every") = 1);
}
