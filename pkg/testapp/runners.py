from django.test.runner import DiscoverRunner

try:
    import xmlrunner
except ImportError:
    xmlrunner = None


class XMLTestSuiteRunner(DiscoverRunner):
    """Writes a JUnit-style ``result.xml`` when unittest-xml-reporting is installed."""

    def run_suite(self, suite, **kwargs):
        if xmlrunner is None:
            return super().run_suite(suite, **kwargs)
        kwargs = dict(verbosity=self.verbosity, descriptions=False)

        with open('./result.xml', 'wb') as xml:
            return xmlrunner.XMLTestRunner(
                output=xml, **kwargs).run(suite)
