#include "mmo/model_io.hpp"

#include <istream>
#include <ostream>
#include <sstream>

#include "json.hpp"
#include "mmo/error.hpp"
#include "mmo/fileio.hpp"

namespace mmo {

namespace {

using nlohmann::json;

json mat(const Eigen::MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(std::move(row));
    }
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(rows)}};
}

Eigen::MatrixXd mat(const json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const json& data = j.at("data");
    if (static_cast<Eigen::Index>(data.size()) != rows) throw Error("matrix row count mismatch");
    Eigen::MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const json& row = data[static_cast<std::size_t>(r)];
        if (static_cast<Eigen::Index>(row.size()) != cols) throw Error("matrix column count mismatch");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

json vec(const Eigen::VectorXd& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

Eigen::VectorXd vec(const json& j) {
    Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    return v;
}

json spec_json(const ModelSpec& s) {
    return {{"structure", to_string(s.structure)},
            {"response", to_string(s.response)},
            {"vowel_levels", s.vowel_levels},
            {"context_levels", s.context_levels},
            {"control_values", s.control_values}};
}

ModelSpec spec_from(const json& j) {
    ModelSpec s;
    s.structure = parse_structure(j.at("structure").get<std::string>());
    s.response = parse_response(j.at("response").get<std::string>());
    s.vowel_levels = j.at("vowel_levels").get<std::array<std::string, 2>>();
    s.context_levels = j.at("context_levels").get<std::array<std::string, 2>>();
    s.control_values = j.at("control_values").get<std::map<std::string, double>>();
    return s;
}

json config_json(const FitConfig& c) {
    return {{"block_diagonal_random", c.block_diagonal_random},
            {"independent_residual", c.independent_residual},
            {"variance_intercept_only", c.variance_intercept_only},
            {"gradient_tolerance", c.gradient_tolerance},
            {"max_iterations", c.max_iterations},
            {"compute_laplace", c.compute_laplace},
            {"log_sd_floor", c.log_sd_floor}};
}

FitConfig config_from(const json& j) {
    FitConfig c;
    c.block_diagonal_random = j.at("block_diagonal_random").get<bool>();
    c.independent_residual = j.at("independent_residual").get<bool>();
    c.variance_intercept_only = j.at("variance_intercept_only").get<bool>();
    c.gradient_tolerance = j.at("gradient_tolerance").get<double>();
    c.max_iterations = j.at("max_iterations").get<int>();
    c.compute_laplace = j.at("compute_laplace").get<bool>();
    c.log_sd_floor = j.at("log_sd_floor").get<double>();
    return c;
}

json design_json(const DesignMatrices& d) {
    return {{"spec", spec_json(d.spec)},
            {"X", mat(d.X)},
            {"Y", mat(d.Y)},
            {"V", mat(d.V)},
            {"Z_speaker", mat(d.Z_speaker)},
            {"speaker_index", d.speaker_index},
            {"word_index", d.word_index},
            {"following_index", d.following_index},
            {"speakers", d.speakers},
            {"words", d.words},
            {"followings", d.followings},
            {"fixed_names", d.fixed_names}};
}

DesignMatrices design_from(const json& j) {
    DesignMatrices d;
    d.spec = spec_from(j.at("spec"));
    d.X = mat(j.at("X"));
    d.Y = mat(j.at("Y"));
    d.V = mat(j.at("V"));
    d.Z_speaker = mat(j.at("Z_speaker"));
    d.speaker_index = j.at("speaker_index").get<std::vector<int>>();
    d.word_index = j.at("word_index").get<std::vector<int>>();
    d.following_index = j.at("following_index").get<std::vector<int>>();
    d.speakers = j.at("speakers").get<std::vector<std::string>>();
    d.words = j.at("words").get<std::vector<std::string>>();
    d.followings = j.at("followings").get<std::vector<std::string>>();
    d.fixed_names = j.at("fixed_names").get<std::vector<std::string>>();
    return d;
}

json component_json(const FitComponent& c) {
    return {{"response", to_string(c.response)},
            {"design", design_json(*c.design)},
            {"theta_hat", vec(c.theta_hat)},
            {"active", c.active},
            {"free_index", c.free_index},
            {"laplace_factor", mat(c.laplace_factor)},
            {"degenerate_curvature", c.degenerate_curvature},
            {"deviance", c.deviance},
            {"gradient_norm", c.gradient_norm},
            {"iterations", c.iterations},
            {"converged", c.converged}};
}

FitComponent component_from(const json& j) {
    FitComponent c;
    c.response = parse_response(j.at("response").get<std::string>());
    c.design = std::make_shared<const DesignMatrices>(design_from(j.at("design")));
    c.theta_hat = vec(j.at("theta_hat"));
    c.active = j.at("active").get<std::vector<bool>>();
    c.free_index = j.at("free_index").get<std::vector<int>>();
    c.laplace_factor = mat(j.at("laplace_factor"));
    c.degenerate_curvature = j.at("degenerate_curvature").get<bool>();
    c.deviance = j.at("deviance").get<double>();
    c.gradient_norm = j.at("gradient_norm").get<double>();
    c.iterations = j.at("iterations").get<int>();
    c.converged = j.at("converged").get<bool>();
    return c;
}

}  // namespace

void save_model(std::ostream& out, const FittedModel& model) {
    json j;
    j["schema_version"] = kModelSchemaVersion;
    j["kind"] = "mmo-fitted-model";
    j["spec"] = spec_json(model.spec);
    j["config"] = config_json(model.config);
    j["mode"] = to_string(model.mode);
    j["loglik"] = model.loglik;
    j["converged"] = model.converged;
    // Derived values, written for readers; load recomputes them.
    j["beta"] = mat(model.beta);
    j["beta_se"] = mat(model.beta_se);
    json comps = json::array();
    for (const auto& c : model.components) comps.push_back(component_json(c));
    j["components"] = std::move(comps);
    out << j.dump(1) << '\n';
}

FittedModel load_model(std::istream& in) {
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(std::string("model file is not valid JSON: ") + e.what());
    }
    try {
        if (j.value("kind", std::string()) != "mmo-fitted-model") throw Error("not a fitted model file");
        const int version = j.at("schema_version").get<int>();
        if (version != kModelSchemaVersion) throw Error("unsupported model schema version " + std::to_string(version));
        FittedModel m;
        m.spec = spec_from(j.at("spec"));
        m.config = config_from(j.at("config"));
        m.mode = parse_fit_mode(j.at("mode").get<std::string>());
        for (const auto& c : j.at("components")) m.components.push_back(component_from(c));
        refresh_estimates(m);
        return m;
    } catch (const json::exception& e) {
        throw Error(std::string("malformed model file: ") + e.what());
    }
}

void save_model(const std::filesystem::path& path, const FittedModel& model) {
    std::ostringstream ss;
    save_model(ss, model);
    write_file_atomic(path, ss.str());
}

FittedModel load_model(const std::filesystem::path& path) {
    std::istringstream ss(read_file(path));
    return load_model(ss);
}

}  // namespace mmo
