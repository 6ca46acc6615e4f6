#include <algorithm>
#include <fstream>
#include <sstream>
#include <vector>

#include "bathykl/errors.hpp"
#include "bathykl/pipeline.hpp"

namespace bathykl::pipeline {

namespace {

struct Series {
    std::string name;
    std::vector<double> x, y;
};

struct Table {
    std::vector<std::string> columns;
    std::vector<std::vector<double>> rows;
};

Table read_csv(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open: " + path.string());
    Table table;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        if (table.columns.empty()) {
            table.columns = cells;
            continue;
        }
        std::vector<double> row;
        row.reserve(cells.size());
        bool numeric = true;
        for (const auto& c : cells) {
            try {
                row.push_back(std::stod(c));
            } catch (const std::exception&) {
                numeric = false;
                break;
            }
        }
        if (numeric) table.rows.push_back(std::move(row));
    }
    return table;
}

int column_index(const Table& t, const std::string& name) {
    const auto it = std::find(t.columns.begin(), t.columns.end(), name);
    if (it == t.columns.end()) throw DataError("missing CSV column: " + name);
    return static_cast<int>(it - t.columns.begin());
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

void write_line_plot(const fs::path& path, const std::string& title,
                     const std::vector<Series>& series, bool log_y) {
    const int width = 720, height = 420, margin = 56;
    double x_lo = 1e300, x_hi = -1e300, y_lo = 1e300, y_hi = -1e300;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            double y = s.y[i];
            if (log_y && y <= 0) continue;
            if (log_y) y = std::log10(y);
            x_lo = std::min(x_lo, s.x[i]);
            x_hi = std::max(x_hi, s.x[i]);
            y_lo = std::min(y_lo, y);
            y_hi = std::max(y_hi, y);
        }
    }
    if (x_hi <= x_lo) x_hi = x_lo + 1;
    if (y_hi <= y_lo) y_hi = y_lo + 1;

    auto px = [&](double x) {
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin);
    };
    auto py = [&](double y) {
        if (log_y) y = std::log10(std::max(y, 1e-300));
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin);
    };

    std::ofstream out(path);
    if (!out) throw DataError("cannot open for writing: " + path.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"15\">"
        << title << "</text>\n";
    out << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << width - 2 * margin
        << "\" height=\"" << height - 2 * margin
        << "\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>\n";

    int color = 0;
    int legend_y = margin + 14;
    for (const auto& s : series) {
        out << "<polyline fill=\"none\" stroke=\"" << kPalette[color % 6]
            << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (log_y && s.y[i] <= 0) continue;
            out << px(s.x[i]) << "," << py(s.y[i]) << " ";
        }
        out << "\"/>\n";
        out << "<text x=\"" << width - margin - 150 << "\" y=\"" << legend_y
            << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << kPalette[color % 6]
            << "\">" << s.name << "</text>\n";
        legend_y += 16;
        ++color;
    }
    out << "</svg>\n";
}

}  // namespace

std::vector<fs::path> cmd_report(const fs::path& dir) {
    std::vector<fs::path> written;

    const fs::path loss_csv = dir / "loss.csv";
    if (fs::exists(loss_csv)) {
        const Table t = read_csv(loss_csv);
        const int ep = column_index(t, "episode");
        const int tr = column_index(t, "train_loss");
        const int va = column_index(t, "val_loss");
        Series train{"train", {}, {}}, val{"validation", {}, {}};
        for (const auto& row : t.rows) {
            train.x.push_back(row[ep]);
            train.y.push_back(row[tr]);
            val.x.push_back(row[ep]);
            val.y.push_back(row[va]);
        }
        const fs::path out = dir / "loss.svg";
        write_line_plot(out, "KL divergence loss per episode", {train, val}, false);
        written.push_back(out);
    }

    const fs::path traj_csv = dir / "trajectories.csv";
    if (fs::exists(traj_csv)) {
        const Table t = read_csv(traj_csv);
        const std::vector<std::pair<std::string, std::string>> tracks{
            {"gt", "ground truth"},     {"corrupted", "corrupted"}, {"mc", "monte carlo"},
            {"constq", "constant q"},   {"naive", "naive gicp"},    {"ours", "learned"}};
        std::vector<Series> series;
        for (const auto& [prefix, label] : tracks) {
            const int cx = column_index(t, prefix + "_x");
            const int cy = column_index(t, prefix + "_y");
            Series s{label, {}, {}};
            for (const auto& row : t.rows) {
                s.x.push_back(row[cx]);
                s.y.push_back(row[cy]);
            }
            series.push_back(std::move(s));
        }
        const fs::path out = dir / "trajectories.svg";
        write_line_plot(out, "Trajectories (xy, last trial)", series, false);
        written.push_back(out);
    }

    if (written.empty()) {
        throw DataError("report: no loss.csv or trajectories.csv in " + dir.string());
    }
    return written;
}

}  // namespace bathykl::pipeline
