#include "amr/app.hpp"

#include <algorithm>
#include <condition_variable>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "CLI11.hpp"
#include "amr/errors.hpp"
#include "amr/evaluation.hpp"
#include "amr/geometry.hpp"
#include "amr/models.hpp"
#include "amr/netarch.hpp"

namespace amr {

namespace fs = std::filesystem;
using json = nlohmann::json;

CliConfig load_cli_config(const fs::path& file, ModelKind model) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read config " + file.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ParseError("config " + file.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ParseError("config " + file.string() + " must hold a JSON object");
  CliConfig c;
  c.train = TrainConfig::defaults_for(model);
  if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  c.generate.seed = c.seed;
  c.train.seed = c.seed;
  if (j.contains("generate")) c.generate = gen_config_from_json(j.at("generate"), c.generate);
  if (j.contains("train")) c.train = train_config_from_json(j.at("train"), c.train);
  if (j.contains("pipeline")) c.pipeline = pipeline_config_from_json(j.at("pipeline"), c.pipeline);
  return c;
}

std::vector<fs::path> list_images(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

void infer_images(const std::vector<fs::path>& images, const fs::path& model_dir, const PipelineConfig& cfg,
                  int workers, std::ostream& out) {
  cfg.validate();
  if (workers < 1) throw ParameterError("workers must be positive");
  if (images.empty()) return;
  workers = std::min<int>(workers, static_cast<int>(images.size()));
  if (workers > 1) torch::set_num_threads(1);

  std::vector<LoadedModels> models;
  for (int w = 0; w < workers; ++w) models.push_back(load_models(model_dir));

  const std::size_t n = images.size();
  const std::size_t window = 4 * static_cast<std::size_t>(workers);
  std::mutex m;
  std::condition_variable cv;
  std::size_t next = 0, written = 0;
  std::vector<std::optional<std::string>> slots(n);
  std::exception_ptr failure;

  auto work = [&](int w) {
    for (;;) {
      std::size_t i = 0;
      {
        std::unique_lock lk(m);
        cv.wait(lk, [&] { return failure || next >= n || next < written + window; });
        if (failure || next >= n) return;
        i = next++;
      }
      try {
        const cv::Mat img = cv::imread(images[i].string(), cv::IMREAD_COLOR);
        if (img.empty()) throw IoError("cannot read image " + images[i].string());
        const ReadingResult r = run_pipeline(img, models[static_cast<std::size_t>(w)].view(), cfg);
        std::string line = result_to_json(images[i].filename().string(), r).dump();
        std::lock_guard lk(m);
        slots[i] = std::move(line);
      } catch (...) {
        std::lock_guard lk(m);
        if (!failure) failure = std::current_exception();
      }
      cv.notify_all();
    }
  };
  std::vector<std::thread> pool;
  for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
  for (std::size_t i = 0; i < n; ++i) {
    std::string line;
    {
      std::unique_lock lk(m);
      cv.wait(lk, [&] { return failure || slots[i].has_value(); });
      if (failure) break;
      line = std::move(*slots[i]);
      slots[i].reset();
      ++written;
    }
    cv.notify_all();
    out << line << '\n';
  }
  cv.notify_all();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::vector<double> parse_sweep(const std::string& text) {
  std::vector<double> rates;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw ParameterError("bad sweep value '" + item + "'");
    }
    if (used != item.size() || v < 0.0 || v >= 100.0) throw ParameterError("bad sweep value '" + item + "'");
    rates.push_back(v / 100.0);
  }
  if (rates.empty()) throw ParameterError("empty sweep");
  return rates;
}

std::string sweep_row_csv(const std::vector<RejectionPoint>& curve) {
  std::ostringstream out;
  for (std::size_t i = 0; i < curve.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g%%", curve[i].rejection_rate * 100.0);
    out << (i ? "," : "") << buf;
  }
  out << '\n';
  for (std::size_t i = 0; i < curve.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", curve[i].recognition_rate);
    out << (i ? "," : "") << buf;
  }
  out << '\n';
  return out.str();
}

namespace {

fs::path annotation_file_for(const fs::path& data) {
  return fs::is_directory(data) ? data / "annotations.json" : data;
}

std::vector<MeterSample> select_split(const std::vector<MeterSample>& all, const std::string& split,
                                      std::uint64_t seed) {
  if (split == "all") return all;
  const DatasetSplit s = split_dataset(all, seed);
  if (split == "train") return s.train;
  if (split == "validation") return s.validation;
  return s.test;
}

void write_text(const fs::path& file, const std::string& text) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  out << text;
}

// --- plot ---------------------------------------------------------------------

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

double parse_number(const std::string& s, const fs::path& file) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw ParseError(file.string() + ": not a number '" + s + "'");
  }
  if (used != s.size()) throw ParseError(file.string() + ": not a number '" + s + "'");
  return v;
}

// Understands loss logs, rejection curves and one-row sweep tables.
std::vector<Series> read_plot_csv(const fs::path& file, std::string* x_label, std::string* y_label) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read " + file.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) rows.push_back(split_csv_line(line));
  }
  if (rows.empty()) throw ParseError(file.string() + ": empty CSV");
  const auto& header = rows.front();
  std::vector<Series> out;
  if (header == std::vector<std::string>{"step", "component", "value"}) {
    *x_label = "step";
    *y_label = "loss";
    std::map<std::string, std::size_t> index;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      if (rows[r].size() != 3) throw ParseError(file.string() + ": expected 3 columns on line " + std::to_string(r + 1));
      auto [it, inserted] = index.try_emplace(rows[r][1], out.size());
      if (inserted) out.push_back({rows[r][1], {}});
      out[it->second].points.emplace_back(parse_number(rows[r][0], file), parse_number(rows[r][2], file));
    }
  } else if (header.size() >= 2 && header[0] == "rejection_rate" && header[1] == "recognition_rate") {
    *x_label = "rejection rate (%)";
    *y_label = "recognition rate";
    out.push_back({"recognition", {}});
    for (std::size_t r = 1; r < rows.size(); ++r) {
      if (rows[r].size() != header.size()) throw ParseError(file.string() + ": ragged row " + std::to_string(r + 1));
      out[0].points.emplace_back(100.0 * parse_number(rows[r][0], file), parse_number(rows[r][1], file));
    }
  } else if (!header.empty() && header[0].size() > 1 && header[0].back() == '%') {
    *x_label = "rejection rate (%)";
    *y_label = "recognition rate";
    if (rows.size() != 2 || rows[1].size() != header.size()) throw ParseError(file.string() + ": sweep table needs one row");
    out.push_back({"recognition", {}});
    for (std::size_t c = 0; c < header.size(); ++c) {
      if (header[c].empty() || header[c].back() != '%') throw ParseError(file.string() + ": bad column " + header[c]);
      out[0].points.emplace_back(parse_number(header[c].substr(0, header[c].size() - 1), file),
                                 parse_number(rows[1][c], file));
    }
  } else {
    throw ParseError(file.string() + ": unrecognised CSV header");
  }
  for (const auto& s : out) {
    if (s.points.empty()) throw ParseError(file.string() + ": no data rows");
  }
  return out;
}

cv::Mat render_plot(const std::vector<Series>& series, const std::string& x_label, const std::string& y_label) {
  const int W = 900, H = 560, L = 80, R = 200, T = 30, B = 60;
  cv::Mat img(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series) {
    for (const auto& [x, y] : s.points) {
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 <= x0) x1 = x0 + 1.0;
  if (y1 <= y0) y1 = y0 + 1.0;
  const double pad = 0.05 * (y1 - y0);
  y0 -= pad;
  y1 += pad;
  auto px = [&](double x) { return L + static_cast<int>((x - x0) / (x1 - x0) * (W - L - R)); };
  auto py = [&](double y) { return H - B - static_cast<int>((y - y0) / (y1 - y0) * (H - T - B)); };
  const cv::Scalar axis(0, 0, 0);
  cv::line(img, {L, H - B}, {W - R, H - B}, axis, 1);
  cv::line(img, {L, T}, {L, H - B}, axis, 1);
  for (int k = 0; k <= 4; ++k) {
    char buf[32];
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    std::snprintf(buf, sizeof buf, "%.3g", xv);
    cv::putText(img, buf, {px(xv) - 15, H - B + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis, 1, cv::LINE_AA);
    std::snprintf(buf, sizeof buf, "%.3g", yv);
    cv::putText(img, buf, {8, py(yv) + 5}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis, 1, cv::LINE_AA);
  }
  cv::putText(img, x_label, {W / 2 - 60, H - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.55, axis, 1, cv::LINE_AA);
  cv::putText(img, y_label, {8, 20}, cv::FONT_HERSHEY_SIMPLEX, 0.55, axis, 1, cv::LINE_AA);
  static const cv::Scalar palette[] = {{180, 60, 30}, {30, 120, 220}, {40, 160, 40}, {40, 40, 200},
                                       {160, 60, 160}, {120, 120, 0}, {0, 140, 140}, {90, 90, 90}};
  for (std::size_t i = 0; i < series.size(); ++i) {
    const cv::Scalar col = palette[i % std::size(palette)];
    std::vector<cv::Point> pts;
    for (const auto& [x, y] : series[i].points) pts.emplace_back(px(x), py(y));
    if (pts.size() == 1) cv::circle(img, pts[0], 3, col, cv::FILLED, cv::LINE_AA);
    cv::polylines(img, pts, false, col, 2, cv::LINE_AA);
    if (pts.size() < 30) {
      for (const auto& p : pts) cv::circle(img, p, 3, col, cv::FILLED, cv::LINE_AA);
    }
    const int ly = T + 20 + 20 * static_cast<int>(i);
    cv::line(img, {W - R + 15, ly - 4}, {W - R + 40, ly - 4}, col, 2, cv::LINE_AA);
    cv::putText(img, series[i].name, {W - R + 45, ly}, cv::FONT_HERSHEY_SIMPLEX, 0.45, axis, 1, cv::LINE_AA);
  }
  return img;
}

// --- subcommands ----------------------------------------------------------------

struct Options {
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string config;
  int workers = 1;
  std::string out;

  // generate
  int count = 100;
  double illegible_fraction = 0.2;
  std::string background_dir;

  // train
  std::string model;
  std::string data;
  int epochs = -1;
  long long iterations = -1;
  int batch = -1;
  double scale = -1.0;
  int threads = -1;

  // infer
  std::string models;
  std::string images;
  std::string annotations;
  std::string split = "all";
  double reject_below = -1.0;
  bool no_rectify = false;

  // eval
  std::string predictions;
  std::string sweep;

  // plot
  std::string input;
  std::string format = "png";
};

CliConfig base_config(const Options& o, ModelKind model = ModelKind::detector) {
  CliConfig c;
  c.train = TrainConfig::defaults_for(model);
  if (!o.config.empty()) c = load_cli_config(o.config, model);
  if (o.seed_set) {
    c.seed = o.seed;
    c.generate.seed = o.seed;
    c.train.seed = o.seed;
  }
  return c;
}

int cmd_generate(const Options& o, const CLI::App& sub) {
  CliConfig c = base_config(o);
  GenConfig& g = c.generate;
  if (sub.count("--count")) g.count = o.count;
  if (sub.count("--illegible-fraction")) g.illegible_fraction = o.illegible_fraction;
  if (sub.count("--workers")) g.workers = o.workers;
  if (!o.background_dir.empty()) g.background_dir = o.background_dir;
  g.validate();
  const auto samples = generate_dataset(g, o.out);
  std::size_t illegible = 0;
  for (const auto& s : samples) illegible += s.legible() ? 0 : 1;
  std::cout << json{{"images", samples.size()}, {"illegible", illegible},
                    {"annotations", (fs::path(o.out) / "annotations.json").string()}}
                   .dump()
            << '\n';
  return kExitOk;
}

int cmd_train(const Options& o, const CLI::App& sub) {
  const ModelKind model = model_kind_from_string(o.model);
  CliConfig c = base_config(o, model);
  TrainConfig& t = c.train;
  t.model = model;
  if (o.epochs >= 0) t.max_epochs = o.epochs;
  if (o.iterations >= 0) t.max_iterations = o.iterations;
  if (o.batch > 0) t.batch_size = o.batch;
  if (o.scale > 0.0) t.scale_factor = o.scale;
  if (o.threads > 0) t.threads = o.threads;
  t.validate();
  const fs::path ann = annotation_file_for(o.data);
  if (!fs::exists(ann)) throw IoError("no annotations at " + ann.string());
  const TrainingData data = load_training_data(ann, c.seed);
  const fs::path out = o.out.empty() ? fs::path("models") : fs::path(o.out);
  const TrainResult r = train_model(t, data, out);
  std::cout << json{{"checkpoint", r.checkpoint.string()},
                    {"loss_log", r.loss_log.string()},
                    {"iterations", r.iterations},
                    {"best_val_loss", r.best_val_loss},
                    {"final_train_loss", r.final_train_loss},
                    {"early_stopped", r.early_stopped}}
                   .dump()
            << '\n';
  return kExitOk;
}

int cmd_infer(const Options& o, const CLI::App& sub) {
  CliConfig c = base_config(o);
  PipelineConfig& p = c.pipeline;
  if (o.reject_below >= 0.0) p.rejection_threshold = o.reject_below;
  if (o.no_rectify) p.rectify = false;
  p.validate();
  if (!fs::exists(fs::path(o.models) / "detector.pt")) throw IoError("no detector.pt in " + o.models);

  std::vector<fs::path> images;
  if (!o.annotations.empty()) {
    const fs::path ann = annotation_file_for(o.annotations);
    for (const auto& s : select_split(load_annotations(ann), o.split, c.seed)) images.push_back(resolve_image(ann, s));
  } else {
    images = list_images(o.images);
  }
  if (o.out.empty() || o.out == "-") {
    infer_images(images, o.models, p, o.workers, std::cout);
  } else {
    const fs::path file(o.out);
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    const fs::path tmp = file.string() + ".tmp";
    {
      std::ofstream out(tmp);
      if (!out) throw IoError("cannot write " + tmp.string());
      infer_images(images, o.models, p, o.workers, out);
    }
    fs::rename(tmp, file);
  }
  return kExitOk;
}

int cmd_eval(const Options& o, const CLI::App& sub) {
  CliConfig c = base_config(o);
  const fs::path ann = annotation_file_for(o.annotations);
  const auto gts = select_split(load_annotations(ann), o.split, c.seed);

  std::ifstream in(o.predictions);
  if (!in) throw IoError("cannot read " + o.predictions);
  std::map<std::string, ReadingResult> by_name;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ParseError(o.predictions + ":" + std::to_string(line_no) + ": " + e.what());
    }
    std::string image;
    ReadingResult r = result_from_json(j, &image);
    by_name[fs::path(image).filename().string()] = std::move(r);
  }

  std::vector<std::string> unpaired;
  std::map<std::string, bool> used;
  std::vector<ReadingResult> results;
  for (const auto& g : gts) {
    const auto name = fs::path(g.image_ref).filename().string();
    const auto it = by_name.find(name);
    if (it == by_name.end()) {
      unpaired.push_back(name + " (no prediction)");
      continue;
    }
    used[name] = true;
    results.push_back(it->second);
  }
  for (const auto& [name, r] : by_name) {
    if (!used.count(name)) unpaired.push_back(name + " (no annotation)");
  }
  if (!unpaired.empty()) {
    std::string msg = "unpaired images:";
    for (const auto& u : unpaired) msg += "\n  " + u;
    throw PairingError(msg);
  }

  const auto rates = o.sweep.empty() ? std::vector<double>{} : parse_sweep(o.sweep);
  const EndToEndReport e2e = eval_end_to_end(results, gts, rates);

  std::vector<DetectionPrediction> dpreds;
  std::vector<GroundTruthBox> dgts;
  std::vector<Quad> qp, qg;
  std::vector<ImageDims> dims;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (!gts[i].counter_quad) continue;
    const auto& r = results[i];
    std::optional<Detection> d;
    if (r.counter_bbox) d = Detection{*r.counter_bbox, 0, r.reading_confidence};
    dpreds.emplace_back(gts[i].image_ref, d);
    dgts.emplace_back(gts[i].image_ref, quad_to_bbox(*gts[i].counter_quad));
    if (r.corners) {
      qp.push_back(*r.corners);
      qg.push_back(*gts[i].counter_quad);
      dims.push_back({static_cast<double>(gts[i].width), static_cast<double>(gts[i].height)});
    }
  }
  json summary{{"images", gts.size()}, {"end_to_end", to_json(e2e)}};
  std::optional<DetectionEvalReport> det;
  if (!dgts.empty()) {
    det = eval_detection(dpreds, dgts);
    summary["detection"] = to_json(*det);
  }
  if (!qp.empty()) summary["corner_error"] = eval_corners(qp, qg, dims).mean;

  if (!o.out.empty()) {
    const fs::path dir(o.out);
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    if (det) write_text(dir / "detection.csv", det->to_csv());
    if (!rates.empty()) {
      write_text(dir / "rejection_curve.csv", rejection_curve_to_csv(e2e.rejection_curve));
      write_text(dir / "sweep.csv", sweep_row_csv(e2e.rejection_curve));
    }
  }
  if (!rates.empty()) std::cout << sweep_row_csv(e2e.rejection_curve);
  std::cout << summary.dump() << '\n';
  return kExitOk;
}

int cmd_dump_arch(const Options& o, const CLI::App& sub) {
  const double scale = o.scale > 0.0 ? o.scale : 1.0;
  const std::string csv = shape_and_flops(build_spec(model_kind_from_string(o.model), scale)).to_csv();
  if (o.out.empty() || o.out == "-") {
    std::cout << csv;
  } else {
    write_text(o.out, csv);
  }
  return kExitOk;
}

int cmd_plot(const Options& o, const CLI::App& sub) {
  std::string xl, yl;
  const auto series = read_plot_csv(o.input, &xl, &yl);
  if (o.format == "csv") {
    std::ostringstream csv;
    csv << "series,x,y\n";
    for (const auto& s : series) {
      for (const auto& [x, y] : s.points) csv << s.name << ',' << x << ',' << y << '\n';
    }
    if (o.out.empty() || o.out == "-") std::cout << csv.str();
    else write_text(o.out, csv.str());
    return kExitOk;
  }
  const fs::path out = o.out.empty() ? fs::path(o.input).replace_extension(".png") : fs::path(o.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  if (!cv::imwrite(out.string(), render_plot(series, xl, yl))) throw IoError("cannot write " + out.string());
  return kExitOk;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Automatic meter reading: data generation, training, inference and evaluation"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* s, bool workers) {
    s->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& v) {
      o.seed = v;
      o.seed_set = true;
    }, "Seed for every random choice");
    s->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    if (workers) s->add_option("--workers", o.workers, "Worker threads")->check(CLI::PositiveNumber);
  };
  const std::vector<std::string> model_names{"detector", "cdcc", "ocr"};

  auto* gen = app.add_subcommand("generate", "Render a synthetic dataset");
  common(gen, true);
  gen->add_option("--out", o.out, "Output directory")->required();
  gen->add_option("--count", o.count, "Number of images")->check(CLI::PositiveNumber);
  gen->add_option("--illegible-fraction", o.illegible_fraction, "Share of illegible samples")
      ->check(CLI::Range(0.0, 1.0));
  gen->add_option("--background-dir", o.background_dir, "Directory of background photos")->check(CLI::ExistingDirectory);

  auto* train = app.add_subcommand("train", "Train one network");
  common(train, false);
  train->add_option("--model", o.model, "detector, cdcc or ocr")->required()->check(CLI::IsMember(model_names));
  train->add_option("--data", o.data, "Dataset directory or annotation file")->required();
  train->add_option("--out", o.out, "Checkpoint directory (default: models)");
  train->add_option("--epochs", o.epochs, "Epoch limit (cdcc)")->check(CLI::NonNegativeNumber);
  train->add_option("--iterations", o.iterations, "Iteration limit (detector, ocr)")->check(CLI::NonNegativeNumber);
  train->add_option("--batch", o.batch, "Batch size")->check(CLI::PositiveNumber);
  train->add_option("--scale", o.scale, "Width multiplier")->check(CLI::PositiveNumber);
  train->add_option("--threads", o.threads, "Intra-op threads")->check(CLI::PositiveNumber);

  auto* infer = app.add_subcommand("infer", "Read meters with trained networks");
  common(infer, true);
  infer->add_option("--models", o.models, "Directory with detector.pt, cdcc.pt and ocr.pt")->required();
  auto* images_opt = infer->add_option("--images", o.images, "Image directory");
  auto* ann_opt = infer->add_option("--annotations", o.annotations, "Read the images listed in an annotation file");
  images_opt->excludes(ann_opt);
  infer->add_option("--split", o.split, "With --annotations: all, train, validation or test")
      ->check(CLI::IsMember({"all", "train", "validation", "test"}));
  infer->add_option("--out", o.out, "JSONL output file (default: stdout)");
  infer->add_option("--reject-below", o.reject_below, "Reject readings below this confidence")
      ->check(CLI::Range(0.0, 1.0));
  infer->add_flag("--no-rectify", o.no_rectify, "Read the unrectified crop");

  auto* eval = app.add_subcommand("eval", "Score inference output against annotations");
  common(eval, false);
  eval->add_option("--annotations", o.annotations, "Annotation file or dataset directory")->required();
  eval->add_option("--predictions", o.predictions, "JSONL from infer")->required();
  eval->add_option("--split", o.split, "all, train, validation or test")
      ->check(CLI::IsMember({"all", "train", "validation", "test"}));
  eval->add_option("--sweep", o.sweep, "Rejection percentages, e.g. 0,5,10,15,20");
  eval->add_option("--out", o.out, "Report directory");

  auto* dump = app.add_subcommand("dump-arch", "Print per-layer shapes and BFLOP as CSV");
  common(dump, false);
  dump->add_option("--model", o.model, "detector, cdcc or ocr")->required()->check(CLI::IsMember(model_names));
  dump->add_option("--scale", o.scale, "Width multiplier")->check(CLI::PositiveNumber);
  dump->add_option("--out", o.out, "CSV file (default: stdout)");

  auto* plot = app.add_subcommand("plot", "Plot a loss log or rejection curve");
  common(plot, false);
  plot->add_option("--input", o.input, "CSV from train or eval")->required();
  plot->add_option("--out", o.out, "Output file");
  plot->add_option("--format", o.format, "png or csv")->check(CLI::IsMember({"png", "csv"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen) return cmd_generate(o, *gen);
    if (*train) return cmd_train(o, *train);
    if (*infer) {
      if (o.images.empty() && o.annotations.empty()) {
        std::cerr << "infer: one of --images or --annotations is required\n";
        return kExitUsage;
      }
      return cmd_infer(o, *infer);
    }
    if (*eval) return cmd_eval(o, *eval);
    if (*dump) return cmd_dump_arch(o, *dump);
    if (*plot) return cmd_plot(o, *plot);
  } catch (const ParameterError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace amr
