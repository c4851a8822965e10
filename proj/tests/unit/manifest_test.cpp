#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "cxr/manifest.hpp"

using namespace cxr;

namespace {

Manifest entries(Label l, Source s, std::size_t n, Partition p = Partition::Train) {
  Manifest m;
  for (std::size_t i = 0; i < n; ++i) {
    m.push_back({to_string(s) + "/" + to_string(l) + "_" + std::to_string(i) + ".png", l, s, p, ""});
  }
  return m;
}

Manifest table_train() {
  Manifest m = entries(Label::Normal, Source::RSNA, 7966);
  auto p = entries(Label::Pneumonia, Source::RSNA, 5421);
  auto c = entries(Label::COVID19, Source::COVIDCollection, 152);
  m.insert(m.end(), p.begin(), p.end());
  m.insert(m.end(), c.begin(), c.end());
  return m;
}

ClassCounts counts(std::size_t n, std::size_t p, std::size_t c) { return {n, p, c}; }

}  // namespace

TEST(Enums, TextRoundTrip) {
  for (Label l : kAllLabels) EXPECT_EQ(parse_label(to_string(l)), l);
  for (Source s : {Source::RSNA, Source::COVIDCollection}) EXPECT_EQ(parse_source(to_string(s)), s);
  for (Partition p : {Partition::Train, Partition::Test}) EXPECT_EQ(parse_partition(to_string(p)), p);
  for (auto m : {DatasetMode::Raw, DatasetMode::RawPlusAug, DatasetMode::Balanced}) {
    EXPECT_EQ(parse_dataset_mode(to_string(m)), m);
  }
  EXPECT_THROW(parse_label("Covid"), FormatError);
  EXPECT_THROW(parse_dataset_mode("smote"), std::invalid_argument);
}

TEST(Csv, RoundTripAndHeader) {
  Manifest m = entries(Label::COVID19, Source::COVIDCollection, 3);
  m[1].aug_recipe = "rot=3.2500;zoom=1.1000;flip=1";
  m[2].partition = Partition::Test;
  const std::string csv = manifest_csv(m);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), kManifestHeader);
  EXPECT_NE(csv.find("COVIDCollection/COVID19_1.png,COVID19,COVIDCollection,train,rot=3.2500;zoom=1.1000;flip=1\n"),
            std::string::npos);
  std::istringstream is(csv);
  EXPECT_EQ(read_manifest(is), m);
}

TEST(Csv, RejectsMalformedRows) {
  auto bad = [](const std::string& body) {
    std::istringstream is(std::string(kManifestHeader) + "\n" + body);
    return read_manifest(is);
  };
  EXPECT_THROW(bad("a.png,Normal,RSNA,train\n"), FormatError);
  EXPECT_THROW(bad("a.png,Normal,RSNA,train,,x\n"), FormatError);
  EXPECT_ANY_THROW(bad("a.png,Healthy,RSNA,train,\n"));
  EXPECT_ANY_THROW(bad("a.png,Normal,RSNA,train,rot=1\n"));
  std::istringstream no_header("a.png,Normal,RSNA,train,\n");
  EXPECT_THROW(read_manifest(no_header), FormatError);
  Manifest comma{{"a,b.png", Label::Normal, Source::RSNA, Partition::Train, ""}};
  std::ostringstream os;
  EXPECT_ANY_THROW(write_manifest(os, comma));
}

TEST(BuildCovidx, FullSizeMatchesPartitionTable) {
  Manifest rsna = entries(Label::Normal, Source::RSNA, 8851);
  auto p = entries(Label::Pneumonia, Source::RSNA, 6012);
  rsna.insert(rsna.end(), p.begin(), p.end());
  Manifest covid = entries(Label::COVID19, Source::COVIDCollection, 183);
  auto split = build_covidx(rsna, covid, 3);
  EXPECT_TRUE(count_classes(split.train) == counts(7966, 5421, 152));
  EXPECT_TRUE(count_classes(split.test) == counts(100, 100, 31));
  // per-class counts are authoritative; they sum to 13539
  EXPECT_EQ(split.train.size(), 13539u);
  EXPECT_EQ(split.test.size(), 231u);
  std::set<std::string> train_paths;
  for (const auto& e : split.train) {
    EXPECT_EQ(e.partition, Partition::Train);
    train_paths.insert(e.path);
  }
  for (const auto& e : split.test) {
    EXPECT_EQ(e.partition, Partition::Test);
    EXPECT_FALSE(train_paths.count(e.path)) << e.path;
    if (e.label == Label::COVID19) {
      EXPECT_EQ(e.source, Source::COVIDCollection);
    }
  }
  auto again = build_covidx(rsna, covid, 3);
  EXPECT_EQ(again.train, split.train);
  EXPECT_EQ(again.test, split.test);
  EXPECT_NE(build_covidx(rsna, covid, 4).test, split.test);
}

TEST(BuildCovidx, ShortfallNamesEveryShortClass) {
  Manifest rsna = entries(Label::Normal, Source::RSNA, 10);
  try {
    build_covidx(rsna, {}, 1, PartitionTargets::scaled(0.001));
    FAIL() << "expected a shortfall";
  } catch (const ShortfallError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("COVID19"), std::string::npos) << msg;
    EXPECT_NE(msg.find("Pneumonia"), std::string::npos) << msg;
    EXPECT_EQ(msg.find("Normal"), std::string::npos) << msg;
  }
}

TEST(BuildCovidx, ScaledTargetsKeepTestRatios) {
  auto t = PartitionTargets::scaled(0.1);
  EXPECT_TRUE(t.train == counts(797, 542, 15));
  EXPECT_TRUE(t.test == counts(10, 10, 3));
  auto tiny = PartitionTargets::scaled(0.001);
  for (Label l : kAllLabels) {
    EXPECT_GE(tiny.train[l], 1u);
    EXPECT_GE(tiny.test[l], 1u);
  }
  EXPECT_THROW(PartitionTargets::scaled(0), std::invalid_argument);
}

TEST(ApplyConfig, StandardConfigurations) {
  const Manifest train = table_train();
  AugSpec aug;
  EXPECT_EQ(apply_config(train, {DatasetMode::Raw}, aug, 1), train);
  auto plus = apply_config(train, {DatasetMode::RawPlusAug}, aug, 1);
  EXPECT_TRUE(count_classes(plus) == counts(4000, 4000, 1152));
  auto balanced = apply_config(train, {DatasetMode::Balanced}, aug, 1);
  EXPECT_TRUE(count_classes(balanced) == counts(1000, 1000, 1000));
  std::size_t covid_aug = 0;
  for (const auto& e : balanced) {
    if (e.augmented()) {
      EXPECT_EQ(e.label, Label::COVID19);
      ++covid_aug;
    }
  }
  EXPECT_EQ(covid_aug, 848u);
  EXPECT_EQ(apply_config(train, {DatasetMode::Balanced}, aug, 1), balanced);
}

TEST(ApplyConfig, ProvenanceStaysInTrain) {
  const Manifest train = table_train();
  std::set<std::string> originals;
  for (const auto& e : train) originals.insert(e.path);
  for (auto mode : {DatasetMode::RawPlusAug, DatasetMode::Balanced}) {
    for (const auto& e : apply_config(train, {mode}, AugSpec{}, 9)) {
      EXPECT_EQ(e.partition, Partition::Train);
      ASSERT_TRUE(originals.count(e.path)) << e.path;
      if (e.augmented()) {
        EXPECT_NO_THROW(parse_recipe(e.aug_recipe));
      }
    }
  }
  Manifest with_test = train;
  with_test.push_back({"t.png", Label::Normal, Source::RSNA, Partition::Test, ""});
  EXPECT_THROW(apply_config(with_test, {DatasetMode::Balanced}, AugSpec{}, 1), std::invalid_argument);
}

TEST(ApplyConfig, ParametersValidated) {
  DatasetConfig c;
  c.per_class = 0;
  EXPECT_THROW(apply_config({}, c, AugSpec{}, 1), std::invalid_argument);
  // a class with no originals cannot be topped up
  auto normals = entries(Label::Normal, Source::RSNA, 5);
  EXPECT_THROW(apply_config(normals, {DatasetMode::Balanced, 1000, 4000, 3}, AugSpec{}, 1), ShortfallError);
}

TEST(Hierarchy, RelabelCounts) {
  const Manifest train = table_train();
  auto root = hierarchical_relabel(train, HierLevel::Root);
  EXPECT_TRUE(count_classes(root) == counts(7966, 5573, 0));
  auto leaf = hierarchical_relabel(train, HierLevel::Leaf);
  EXPECT_TRUE(count_classes(leaf) == counts(0, 5421, 152));
  EXPECT_TRUE(hierarchical_relabel({}, HierLevel::Root).empty());
  EXPECT_TRUE(hierarchical_relabel({}, HierLevel::Leaf).empty());
}

TEST(Hierarchy, TaskIndexMaps) {
  EXPECT_EQ(class_index(Task::Root, Label::Normal), 0u);
  EXPECT_EQ(class_index(Task::Root, Label::COVID19), 1u);
  EXPECT_EQ(class_index(Task::Leaf, Label::Pneumonia), 0u);
  EXPECT_EQ(class_index(Task::Leaf, Label::COVID19), 1u);
  EXPECT_THROW(class_index(Task::Leaf, Label::Normal), std::invalid_argument);
  for (Task t : {Task::Flat, Task::Root, Task::Leaf}) {
    for (std::size_t i = 0; i < num_classes(t); ++i) EXPECT_EQ(class_index(t, label_of(t, i)), i);
    EXPECT_THROW(label_of(t, num_classes(t)), std::out_of_range);
  }
}
